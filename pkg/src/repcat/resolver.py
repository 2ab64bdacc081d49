"""Logical-to-physical file name translation.

The search path is a colon-separated list read from ``CATALOG_SEARCH_PATH``.
Each element is either an absolute local directory, checked for
``<dir>/<lfn>``, or one of the reserved words below, answered from the
catalog.  Elements are tried in order and the first hit wins.

=============  ==========================================================
DB_LOCAL_DISK  disk replica on a host of the resolving site
DB_CLOSEST     replica with the lowest link cost from the resolving site
DB_ANY         first replica in query order (host, path, origin)
=============  ==========================================================
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass
from typing import Mapping, Optional, Union

from repcat.errors import EmptyPath, NotFound, UnknownToken
from repcat.model import validate_lfn
from repcat.query import ReplicaView, closest_in, local_disk_in, replicas_in
from repcat.store import Store

ENV_VAR = "CATALOG_SEARCH_PATH"


class ReservedWord(enum.Enum):
    DB_LOCAL_DISK = "DB_LOCAL_DISK"
    DB_CLOSEST = "DB_CLOSEST"
    DB_ANY = "DB_ANY"


@dataclass(frozen=True)
class LocalDir:
    path: str


Element = Union[LocalDir, ReservedWord]


class Source(enum.Enum):
    DIRECTORY = "directory"
    CATALOG = "catalog"


@dataclass(frozen=True)
class Resolution:
    lfn: str
    physical_path: str
    source: Source
    replica: Optional[ReplicaView] = None
    element: Optional[Element] = None


def parse_search_path(raw: str) -> list[Element]:
    if not raw:
        raise EmptyPath("search path is empty")
    elements: list[Element] = []
    for token in raw.split(":"):
        if token.startswith("/"):
            elements.append(LocalDir(token))
        elif token in ReservedWord.__members__:
            elements.append(ReservedWord[token])
        else:
            raise UnknownToken(f"search path element {token!r} is neither an absolute directory nor a reserved word")
    return elements


def search_path_from_env(env: Optional[Mapping[str, str]] = None) -> list[Element]:
    env = os.environ if env is None else env
    return parse_search_path(env.get(ENV_VAR, ""))


def resolve(lfn: str, path: list[Element], store: Store, site: Optional[str] = None) -> Resolution:
    """Walk ``path`` in order and return the first hit; raise NotFound when
    nothing matches.  Directory hits are trusted without consulting the
    catalog."""
    lfn = validate_lfn(lfn)
    if not path:
        raise EmptyPath("search path is empty")
    site = site or store.site
    with store.reading() as view:
        for element in path:
            if isinstance(element, LocalDir):
                candidate = os.path.join(element.path, lfn)
                if os.path.isfile(candidate):
                    return Resolution(lfn, candidate, Source.DIRECTORY, None, element)
                continue
            if element is ReservedWord.DB_LOCAL_DISK:
                replica = local_disk_in(view, lfn, site)
            elif element is ReservedWord.DB_CLOSEST:
                costed = closest_in(view, lfn, site)
                replica = costed.replica if costed else None
            else:
                found = replicas_in(view, lfn)
                replica = found[0] if found else None
            if replica is not None:
                return Resolution(lfn, replica.path, Source.CATALOG, replica, element)
    raise NotFound(f"{lfn} not found on the search path")
