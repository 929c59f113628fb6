import math
from dataclasses import dataclass

from ..errors import ContractError


@dataclass(frozen=True)
class TimeGrid:
    t_final: float
    n_steps: int
    substeps: int = 1

    def __post_init__(self):
        if self.t_final <= 0 or self.n_steps < 1 or self.substeps < 1:
            raise ContractError("TimeGrid needs t_final > 0, n_steps >= 1, substeps >= 1")
        if abs(self.dt * self.n_steps - self.t_final) > math.ulp(self.t_final):
            raise ContractError("t_final is not an exact multiple of dt")

    @property
    def dt(self):
        return self.t_final / self.n_steps

    def times(self):
        return [t * self.dt for t in range(self.n_steps + 1)]


TANK_GRID = TimeGrid(1.0, 100, 1)
CSTR_GRID = TimeGrid(100.0, 100, 20)
