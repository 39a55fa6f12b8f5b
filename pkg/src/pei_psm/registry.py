"""Operator device lists and their slot-aligned bit-plane encoding."""
from __future__ import annotations

import enum
import hashlib
import os
import threading
from pathlib import Path

import numpy as np

from .encoding import PEI, PEI_DIGITS, CWCParams, EncodingError, PBHParams, encode_cwc_many, pbh_map_many


class ListKind(enum.Enum):
    BLACKLIST = "blacklist"
    GREYLIST = "greylist"


class RegistryError(ValueError):
    pass


class DeviceList:
    """A set of PEIs of one kind.  Mutations notify attached encodings."""

    def __init__(self, kind: ListKind, entries=()):
        self.kind = ListKind(kind)
        self._values: set[int] = set()
        self.sibling: DeviceList | None = None
        self._encodings: dict = {}
        self._lock = threading.RLock()
        for p in entries:
            self.add_pei(p)

    def __len__(self):
        return len(self._values)

    def __contains__(self, p) -> bool:
        return _val(p) in self._values

    def __iter__(self):
        return (PEI.from_int(v) for v in sorted(self._values))

    def __eq__(self, other):
        return isinstance(other, DeviceList) and self.kind == other.kind and self._values == other._values

    def values(self) -> np.ndarray:
        return np.fromiter(sorted(self._values), dtype=np.int64, count=len(self._values))

    def add_pei(self, p) -> "DeviceList":
        v = _val(p)
        with self._lock:
            if self.sibling is not None and v in self.sibling._values:
                raise RegistryError(f"{PEI.from_int(v)} is already on the {self.sibling.kind.value}")
            if v in self._values:
                raise RegistryError(f"{PEI.from_int(v)} is already on the {self.kind.value}")
            self._values.add(v)
            for enc in self._encodings.values():
                enc._touch(v)
        return self

    def remove_pei(self, p) -> "DeviceList":
        v = _val(p)
        with self._lock:
            if v not in self._values:
                raise RegistryError(f"{PEI.from_int(v)} is not on the {self.kind.value}")
            self._values.remove(v)
            for enc in self._encodings.values():
                enc._touch(v)
        return self

    def copy(self) -> "DeviceList":
        d = DeviceList(self.kind)
        d._values = set(self._values)
        return d


def _val(p) -> int:
    if isinstance(p, PEI):
        return p.value
    if isinstance(p, str):
        return PEI(p).value
    return PEI.from_int(int(p)).value


class Registry:
    """The operator's list pair; enforces disjointness across the two."""

    def __init__(self, blacklist: DeviceList | None = None, greylist: DeviceList | None = None,
                 greylist_authorized: bool = True):
        # the greylist is held in the clear; access is gated by LE authorisation
        self.greylist_authorized = greylist_authorized
        self.blacklist = blacklist or DeviceList(ListKind.BLACKLIST)
        self.greylist = greylist or DeviceList(ListKind.GREYLIST)
        if self.blacklist.kind is not ListKind.BLACKLIST or self.greylist.kind is not ListKind.GREYLIST:
            raise RegistryError("list kinds swapped")
        if self.blacklist._values & self.greylist._values:
            raise RegistryError("blacklist and greylist overlap")
        self.blacklist.sibling = self.greylist
        self.greylist.sibling = self.blacklist

    def __getitem__(self, kind: ListKind) -> DeviceList:
        if ListKind(kind) is ListKind.BLACKLIST:
            return self.blacklist
        if not self.greylist_authorized:
            raise RegistryError("greylist access requires LE authorisation")
        return self.greylist


def add_pei(lst: DeviceList, p) -> DeviceList:
    return lst.add_pei(p)


def remove_pei(lst: DeviceList, p) -> DeviceList:
    return lst.remove_pei(p)


# ---------------------------------------------------------------- encoding

class EncodedList:
    """Bit-plane layout: planes[r, j, s] = bit j of the codeword at row r, slot s.

    Entries of a slot are placed in rows by ascending residual, so the layout
    is a function of the entry set alone (incremental == fresh).
    """

    def __init__(self, pp: PBHParams, cp: CWCParams):
        self.pp = pp
        self.cp = cp
        self.planes = np.zeros((0, cp.l, pp.N), dtype=np.uint8)
        self.occupancy = np.zeros(pp.N, dtype=np.int64)
        self.dirty_slots: set[int] = set()
        self.row_versions = np.zeros(0, dtype=np.int64)
        self._slots: dict[int, set[int]] | None = None  # slot -> residuals, built lazily
        self._values: set[int] = set()
        self._lock = threading.RLock()

    @property
    def rows(self) -> int:
        return self.planes.shape[0]

    @property
    def size(self) -> int:
        return int(self.occupancy.sum())

    def _build(self, values: np.ndarray):
        slots, res = pbh_map_many(values, self.pp)
        order = np.lexsort((res, slots))
        slots, res = slots[order], res[order]
        N = self.pp.N
        occ = np.bincount(slots, minlength=N).astype(np.int64)
        start = np.concatenate([[0], np.cumsum(occ)[:-1]])
        rank = np.arange(len(slots)) - start[slots]
        R = int(occ.max()) if len(slots) else 0
        planes = np.zeros((R, self.cp.l, N), dtype=np.uint8)
        if len(slots):
            cw = encode_cwc_many(res, self.cp)
            planes[rank, :, slots] = cw
        self.planes = planes
        self.occupancy = occ
        self.row_versions = np.zeros(R, dtype=np.int64)
        self._values = set(int(v) for v in values)
        self._slots = None
        self.dirty_slots.clear()

    def _slot_index(self) -> dict:
        if self._slots is None:
            vals = np.fromiter(self._values, dtype=np.int64, count=len(self._values))
            slots, res = pbh_map_many(vals, self.pp)
            d: dict[int, set[int]] = {}
            for s, r in zip(slots.tolist(), res.tolist()):
                d.setdefault(s, set()).add(r)
            self._slots = d
        return self._slots

    def _touch(self, v: int):
        with self._lock:
            s, r = pbh_map_many([v], self.pp)
            s, r = int(s[0]), int(r[0])
            idx = self._slot_index()
            bucket = idx.setdefault(s, set())
            if v in self._values:
                self._values.remove(v)
                bucket.discard(r)
            else:
                self._values.add(v)
                bucket.add(r)
            self.dirty_slots.add(s)

    def refresh(self):
        """Re-encode only the dirty slots."""
        with self._lock:
            if not self.dirty_slots:
                return
            idx = self._slot_index()
            dirty = sorted(self.dirty_slots)
            new_occ = self.occupancy.copy()
            for s in dirty:
                new_occ[s] = len(idx.get(s, ()))
            R_new = int(new_occ.max()) if new_occ.size else 0
            R_old = self.rows
            planes = self.planes
            versions = self.row_versions
            if R_new > R_old:
                planes = np.concatenate([planes, np.zeros((R_new - R_old,) + planes.shape[1:], np.uint8)])
                versions = np.concatenate([versions, np.zeros(R_new - R_old, np.int64)])
            else:
                planes = planes.copy()
            changed = np.zeros(max(R_new, R_old), dtype=bool)
            for s in dirty:
                res = sorted(idx.get(s, ()))
                col = np.zeros((planes.shape[0], self.cp.l), dtype=np.uint8)
                if res:
                    col[: len(res)] = encode_cwc_many(res, self.cp)
                diff = (planes[:, :, s] != col).any(axis=1)
                changed[: len(diff)] |= diff
                planes[:, :, s] = col
                if not idx.get(s):
                    idx.pop(s, None)
            versions = versions + changed[: len(versions)]
            self.planes = planes[:R_new]
            self.row_versions = versions[:R_new]
            self.occupancy = new_occ
            self.dirty_slots.clear()

    def snapshot(self) -> "EncodedList":
        """Consistent read-only copy for an in-flight query."""
        with self._lock:
            o = EncodedList(self.pp, self.cp)
            o.planes = self.planes  # refresh() never mutates a published array
            o.occupancy = self.occupancy.copy()
            o.row_versions = self.row_versions.copy()
            o._values = set()
            return o

    def entries_at(self, row: int, slot: int) -> np.ndarray:
        return self.planes[row, :, slot]


def preprocess(lst: DeviceList, pp: PBHParams, cp: CWCParams) -> EncodedList:
    """Encode a list; repeated calls with the same params update incrementally."""
    key = (pp, cp)
    with lst._lock:
        enc = lst._encodings.get(key)
        if enc is None:
            enc = EncodedList(pp, cp)
            enc._build(lst.values())
            lst._encodings[key] = enc
        else:
            enc.refresh()
        return enc


def preprocess_fresh(lst: DeviceList, pp: PBHParams, cp: CWCParams) -> EncodedList:
    enc = EncodedList(pp, cp)
    enc._build(lst.values())
    return enc


def gen_random_list(size: int, seed: int, kind: ListKind = ListKind.BLACKLIST, exclude=()) -> DeviceList:
    """Deterministic list of distinct random 14-digit identifiers."""
    if size < 0:
        raise RegistryError("size must be non-negative")
    rng = np.random.default_rng(seed)
    excl = {_val(p) for p in exclude}
    vals: list[int] = []
    seen: set[int] = set()
    while len(vals) < size:
        for v in rng.integers(0, 10 ** PEI_DIGITS, size - len(vals) + 16).tolist():
            if v not in seen and v not in excl:
                seen.add(v)
                vals.append(v)
                if len(vals) == size:
                    break
    d = DeviceList(kind)
    d._values = set(vals)
    return d


# ------------------------------------------------------------------- files

def save_list(lst: DeviceList, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for v in sorted(lst._values):
            f.write(f"{v:0{PEI_DIGITS}d}\n")


def load_list(path, kind: ListKind) -> DeviceList:
    vals: set[int] = set()
    with open(path, encoding="utf-8") as f:
        for no, line in enumerate(f, 1):
            s = line.strip()
            if not s:
                continue
            try:
                v = PEI(s).value
            except EncodingError as e:
                raise RegistryError(f"{path}:{no}: {e}") from None
            if v in vals:
                raise RegistryError(f"{path}:{no}: duplicate identifier {s}")
            vals.add(v)
    d = DeviceList(kind)
    d._values = vals
    return d


def _cache_key(lst: DeviceList, pp: PBHParams, cp: CWCParams) -> str:
    h = hashlib.sha256()
    h.update(pp.perm_key + f"|{pp.N}|{pp.lam}|{cp.h}|{cp.l}|".encode())
    h.update(lst.values().tobytes())
    return h.hexdigest()


def preprocess_cached(lst: DeviceList, pp: PBHParams, cp: CWCParams, list_path) -> EncodedList:
    """preprocess() with a bit-plane sidecar next to the list file."""
    side = Path(str(list_path) + ".planes.npz")
    key = _cache_key(lst, pp, cp)
    if side.exists():
        with np.load(side) as z:
            if str(z["key"]) == key:
                enc = EncodedList(pp, cp)
                enc.planes = z["planes"]
                enc.occupancy = z["occupancy"]
                enc.row_versions = np.zeros(enc.planes.shape[0], np.int64)
                enc._values = set(lst._values)
                lst._encodings[(pp, cp)] = enc
                return enc
    enc = preprocess(lst, pp, cp)
    tmp = side.with_suffix(".tmp.npz")
    np.savez(tmp, key=np.array(key), planes=enc.planes, occupancy=enc.occupancy)
    os.replace(tmp, side)
    return enc
