"""Naive dictionary-based cache+NVM model used as the test oracle.

Deliberately simple and slow: per-line state plus an explicit LRU list
per set.  Nothing here is shared with the engine implementation.
"""


class RefModel:
    def __init__(self, capacity, line_size=64, associativity=0):
        self.line_size = line_size
        num_lines = capacity // line_size
        self.ways = associativity or num_lines
        self.num_sets = 1 if associativity == 0 else num_lines // associativity
        # per set: list of line bases, index 0 = least recently used
        self.lru = [[] for _ in range(self.num_sets)]
        self.cache = {}  # base -> {"dirty": bool, "data": bytearray}
        self.nvm = {}  # base -> bytearray
        self.mapped_end = 0

    def map_frontier(self, end):
        self.mapped_end = max(self.mapped_end, end)

    def _set_of(self, base):
        return (base // self.line_size) % self.num_sets

    def _nvm_line(self, base):
        blk = self.nvm.get(base)
        return bytearray(blk) if blk is not None else bytearray(self.line_size)

    def _touch(self, base):
        order = self.lru[self._set_of(base)]
        if base in self.cache:
            order.remove(base)
            order.append(base)
            return
        if len(order) >= self.ways:
            victim = order.pop(0)
            v = self.cache.pop(victim)
            if v["dirty"]:
                self.nvm[victim] = bytearray(v["data"])
        self.cache[base] = {"dirty": False, "data": self._nvm_line(base)}
        order.append(base)

    def _lines_of(self, addr, length):
        ls = self.line_size
        first = (addr // ls) * ls
        last = ((addr + length - 1) // ls) * ls
        return list(range(first, last + ls, ls))

    def read(self, addr, length):
        out = bytearray()
        for base in self._lines_of(addr, length):
            self._touch(base)
            lo = max(addr, base) - base
            hi = min(addr + length, base + self.line_size) - base
            out += self.cache[base]["data"][lo:hi]
        return bytes(out)

    def write(self, addr, data):
        pos = 0
        for base in self._lines_of(addr, len(data)):
            self._touch(base)
            lo = max(addr, base) - base
            hi = min(addr + len(data), base + self.line_size) - base
            self.cache[base]["data"][lo:hi] = data[pos:pos + hi - lo]
            self.cache[base]["dirty"] = True
            pos += hi - lo

    def clflush(self, addr):
        base = (addr // self.line_size) * self.line_size
        if base in self.cache:
            entry = self.cache.pop(base)
            self.lru[self._set_of(base)].remove(base)
            if entry["dirty"]:
                self.nvm[base] = bytearray(entry["data"])

    def persist_init(self, addr, data):
        ls = self.line_size
        pos = 0
        for base in self._lines_of(addr, len(data)):
            lo = max(addr, base) - base
            hi = min(addr + len(data), base + ls) - base
            blk = self._nvm_line(base)
            blk[lo:hi] = data[pos:pos + hi - lo]
            self.nvm[base] = blk
            pos += hi - lo
            if base in self.cache:
                self.cache.pop(base)
                self.lru[self._set_of(base)].remove(base)

    # -- comparison helpers -------------------------------------------------

    def nvm_canonical(self):
        zero = bytes(self.line_size)
        return {k: bytes(v) for k, v in sorted(self.nvm.items()) if bytes(v) != zero}

    def cache_state(self):
        """Per set: list of (base, dirty, bytes) in LRU -> MRU order."""
        out = []
        for order in self.lru:
            out.append(
                [(b, self.cache[b]["dirty"], bytes(self.cache[b]["data"])) for b in order]
            )
        return out


def engine_cache_state(engine):
    """Engine cache in the same shape as RefModel.cache_state()."""
    out = []
    for cache in engine._sets:
        out.append([(base, e[0], bytes(e[1])) for base, e in cache.items()])
    return out
