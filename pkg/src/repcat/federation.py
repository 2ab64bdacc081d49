"""Federation membership config.

Text file, one site per line::

    <ordinal> <site-id> <host:port>

Blank lines and ``#`` comments are ignored.  Operators distribute the same
file to every site; its digest is exchanged in the wire handshake so that
sites with diverging membership refuse to talk to each other.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from repcat.errors import UnknownSite, UsageError
from repcat.model import Site, validate_site_id

DEFAULT_PORT = 7474


@dataclass(frozen=True)
class Member:
    ordinal: int
    site: str
    address: str

    @property
    def host_port(self) -> tuple[str, int]:
        return split_endpoint(self.address)


def split_endpoint(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep:
        return address, DEFAULT_PORT
    try:
        return host, int(port)
    except ValueError:
        raise UsageError(f"bad endpoint {address!r}") from None


class Federation:
    def __init__(self, members: Iterable[Member]) -> None:
        ordered = sorted(members, key=lambda m: m.ordinal)
        self.members: tuple[Member, ...] = tuple(ordered)
        self._by_site = {m.site: m for m in ordered}
        if len(self._by_site) != len(ordered):
            raise UsageError("duplicate site id in federation")
        if len({m.ordinal for m in ordered}) != len(ordered):
            raise UsageError("duplicate ordinal in federation")
        for m in ordered:
            validate_site_id(m.site)
            if not 0 < m.ordinal < 2**32:
                raise UsageError(f"ordinal out of range for {m.site}")
        self.digest = hashlib.sha256(self.dumps().encode("utf-8")).digest()

    @classmethod
    def parse(cls, text: str) -> "Federation":
        members = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise UsageError(f"federation line {lineno}: expected '<ordinal> <site-id> <host:port>'")
            try:
                ordinal = int(parts[0])
            except ValueError:
                raise UsageError(f"federation line {lineno}: bad ordinal {parts[0]!r}") from None
            members.append(Member(ordinal, parts[1], parts[2]))
        if not members:
            raise UsageError("federation config lists no sites")
        return cls(members)

    @classmethod
    def load(cls, path: str | Path) -> "Federation":
        return cls.parse(Path(path).read_text())

    @classmethod
    def of(cls, *sites: str, base_port: int = DEFAULT_PORT) -> "Federation":
        """Federation of ``sites`` with ordinals 1..n on localhost ports."""
        return cls(Member(i, s, f"127.0.0.1:{base_port + i - 1}") for i, s in enumerate(sites, 1))

    def dumps(self) -> str:
        """Normalized text form; the digest is computed over this."""
        return "".join(f"{m.ordinal} {m.site} {m.address}\n" for m in self.members)

    def __contains__(self, site: str) -> bool:
        return site in self._by_site

    def __iter__(self):
        return iter(self.members)

    def __len__(self) -> int:
        return len(self.members)

    def member(self, site: str) -> Member:
        try:
            return self._by_site[site]
        except KeyError:
            raise UnknownSite(f"{site} is not a federation member") from None

    def ordinal(self, site: str) -> int:
        return self.member(site).ordinal

    @property
    def site_ids(self) -> list[str]:
        return [m.site for m in self.members]

    def sites(self) -> list[Site]:
        return [Site(m.site, m.ordinal) for m in self.members]

    def with_member(self, member: Member) -> "Federation":
        return Federation([*self.members, member])
