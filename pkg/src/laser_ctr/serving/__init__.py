from .client import Client, RemoteError
from .protocol import ErrorCode, Frame, Op, ProtocolError
from .server import SeqServer, Service, serve

__all__ = ["Client", "ErrorCode", "Frame", "Op", "ProtocolError", "RemoteError", "SeqServer", "Service", "serve"]
