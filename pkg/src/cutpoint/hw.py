"""Accelerator configuration."""

from dataclasses import dataclass, replace

MB = 1 << 20


@dataclass(frozen=True)
class HwConfig:
    """Accelerator parameters.

    ``n_mac`` counts physical MACs of the shared array (2 * T_i * T_o, each
    performing two INT8 multiplications for normal convolution).  ``mac_budget``
    and ``bram_budget`` are the alpha / beta limits of the search.
    """
    t_i: int = 32
    t_o: int = 32
    q_a: int = 8
    q_s: int = 32
    freq: float = 200e6
    n_mac: int = 2048
    mac_budget: int = 2240
    bram_budget: int = 4320
    bus_bytes: int = 64
    setup_cycles: int = 100
    dram_bytes: int = 1 << 32
    lut_brams: bool = True

    def __post_init__(self):
        if self.t_i <= 0 or self.t_i != self.t_o:
            raise ValueError("T_i and T_o must be equal and positive")
        if self.q_s < self.q_a:
            raise ValueError("partial-sum width Q_S must be >= Q_A")
        if self.q_a % 8:
            raise ValueError("Q_A must be a whole number of bytes")
        if self.bus_bytes <= 0:
            raise ValueError("bus_bytes must be positive")

    @property
    def bytes_per_elem(self):
        return self.q_a // 8

    @property
    def bank_bytes(self):
        """Bytes in one word across all banks of a feature buffer."""
        return self.t_i * self.bytes_per_elem

    @property
    def products_per_mac(self):
        """Two 8-bit products share one wide multiplier; wider operands do not."""
        return 2 if self.q_a == 8 else 1

    def with_parallelism(self, t):
        return replace(self, t_i=t, t_o=t, n_mac=2 * t * t)

    def replace(self, **kw):
        return replace(self, **kw)


def kcu1500(**kw):
    """200 MHz, T=32 INT8 design point with the XCKU115 BRAM18K count."""
    return HwConfig(**kw)
