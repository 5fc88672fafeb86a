"""Middlebox applications built on the replicated state objects."""

from .packet import DIR_IN, DIR_OUT, Packet, Verdict
from .firewall import Firewall
from .idps import Idps
from .nat import Nat

__all__ = ["Packet", "Verdict", "DIR_IN", "DIR_OUT", "Nat", "Idps", "Firewall"]
