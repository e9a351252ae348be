"""Counter-based 64-bit pseudo-random generator (SplitMix64 mix function).

State is just (seed, counter), so checkpoints can serialize it and training
resumes bit-exactly on any platform.
"""

from __future__ import annotations

from dataclasses import dataclass

_MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15


def _mix(x: int) -> int:
    z = (x + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass
class CounterRng:
    seed: int
    counter: int = 0

    def next_u64(self) -> int:
        v = _mix((self.seed + self.counter * _GOLDEN) & _MASK64)
        self.counter += 1
        return v

    def uniform(self) -> float:
        """Uniform in [0, 1) with 53-bit resolution."""
        return (self.next_u64() >> 11) / float(1 << 53)

    def bernoulli(self, p: float) -> int:
        return 1 if self.uniform() < p else 0

    def randrange(self, n: int) -> int:
        if n <= 0:
            raise ValueError("randrange needs n >= 1")
        return self.next_u64() % n

    def sample_indices(self, n: int, k: int) -> list[int]:
        """k distinct indices from range(n); k may not exceed n."""
        if k > n:
            raise ValueError("sample larger than population")
        picked: list[int] = []
        seen = set()
        while len(picked) < k:
            i = self.randrange(n)
            if i not in seen:
                seen.add(i)
                picked.append(i)
        return picked

    def state(self) -> dict:
        return {"seed": self.seed, "counter": self.counter}

    @classmethod
    def from_state(cls, state: dict) -> "CounterRng":
        return cls(seed=int(state["seed"]), counter=int(state["counter"]))
