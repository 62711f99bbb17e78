"""Unix-socket channels carrying control frames.

`Channel` is the non-blocking, buffered flavour used inside the root and
daemon event loops; `BlockingChannel` is what a worker holds.
"""
from __future__ import annotations

import errno
import os
import selectors
import socket
from typing import List, Optional

from .wire import ControlMessage, FrameReader, encode

RECV_CHUNK = 1 << 18


class ChannelClosed(ConnectionError):
    pass


def listen_unix(path: str, backlog: int = 1024) -> socket.socket:
    if os.path.exists(path):
        os.unlink(path)
    s = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    s.bind(path)
    s.listen(backlog)
    s.setblocking(False)
    return s


def connect_unix(path: str, timeout: float = 10.0) -> socket.socket:
    s = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    s.settimeout(timeout)
    s.connect(path)
    s.settimeout(None)
    return s


class Channel:
    """Non-blocking framed channel registered with a selector."""

    def __init__(self, sock: socket.socket, sel: selectors.BaseSelector, owner=None, on_lost=None):
        sock.setblocking(False)
        self.sock = sock
        self.sel = sel
        self.owner = owner
        # called once if the peer vanishes under a send; EOF on read is reported by on_readable
        self.on_lost = on_lost
        self.reader = FrameReader()
        self.out = bytearray()
        self.closed = False
        sel.register(sock, selectors.EVENT_READ, self)

    def send(self, m: ControlMessage) -> None:
        self.send_raw(encode(m))

    def send_raw(self, data: bytes) -> None:
        if self.closed:
            return
        if not self.out:
            try:
                n = self.sock.send(data)
            except BlockingIOError:
                n = 0
            except OSError:
                self._lost()
                return
            if n == len(data):
                return
            data = data[n:]
            self.sel.modify(self.sock, selectors.EVENT_READ | selectors.EVENT_WRITE, self)
        self.out += data

    def on_writable(self) -> None:
        if self.closed:
            return
        try:
            n = self.sock.send(self.out)
        except BlockingIOError:
            return
        except OSError:
            self._lost()
            return
        del self.out[:n]
        if not self.out:
            self.sel.modify(self.sock, selectors.EVENT_READ, self)

    def on_readable(self) -> Optional[List[ControlMessage]]:
        """Frames read so far, or None once the peer has gone away."""
        if self.closed:
            return None
        try:
            data = self.sock.recv(RECV_CHUNK)
        except BlockingIOError:
            return []
        except OSError as e:
            if e.errno not in (errno.ECONNRESET, errno.EPIPE):
                raise
            data = b""
        if not data:
            self.close()
            return None
        return self.reader.feed(data)

    def _lost(self) -> None:
        self.close()
        if self.on_lost is not None:
            self.on_lost(self)

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        try:
            self.sel.unregister(self.sock)
        except (KeyError, ValueError):
            pass
        self.sock.close()


class BlockingChannel:
    def __init__(self, sock: socket.socket):
        sock.setblocking(True)
        self.sock = sock
        self.reader = FrameReader()
        self.backlog: List[ControlMessage] = []

    def send(self, m: ControlMessage) -> None:
        self.sock.sendall(encode(m))

    def recv(self, timeout: Optional[float] = None) -> Optional[ControlMessage]:
        """Next frame; None on timeout. Raises ChannelClosed at EOF."""
        while not self.backlog:
            self.sock.settimeout(timeout)
            try:
                data = self.sock.recv(RECV_CHUNK)
            except (socket.timeout, BlockingIOError):
                return None
            except OSError as e:
                raise ChannelClosed(str(e)) from e
            finally:
                self.sock.settimeout(None)
            if not data:
                raise ChannelClosed("peer closed the channel")
            self.backlog.extend(self.reader.feed(data))
        return self.backlog.pop(0)

    def poll(self) -> Optional[ControlMessage]:
        if not self.backlog:
            try:
                data = self.sock.recv(RECV_CHUNK, socket.MSG_DONTWAIT)
            except BlockingIOError:
                return None
            except OSError as e:
                raise ChannelClosed(str(e)) from e
            if not data:
                raise ChannelClosed("peer closed the channel")
            self.backlog.extend(self.reader.feed(data))
            if not self.backlog:
                return None
        return self.backlog.pop(0)

    def close(self) -> None:
        self.sock.close()
