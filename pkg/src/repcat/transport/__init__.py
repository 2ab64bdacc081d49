"""Server-to-server sync transport: wire format, sessions, TCP and simulator."""

from repcat.transport.session import ClientSession, ServerSession, serve_channel
from repcat.transport.sim import LinkFaults, SimNetwork, sim_create, sim_heal, sim_partition
from repcat.transport.tcp import SyncServer, connect, listen
from repcat.transport.wire import DEFAULT_MAX_BATCH, PROTOCOL_VERSION, Frame, MsgType

__all__ = [
    "ClientSession", "ServerSession", "serve_channel",
    "LinkFaults", "SimNetwork", "sim_create", "sim_heal", "sim_partition",
    "SyncServer", "connect", "listen",
    "DEFAULT_MAX_BATCH", "PROTOCOL_VERSION", "Frame", "MsgType",
]
