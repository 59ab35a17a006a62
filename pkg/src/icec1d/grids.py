"""Uniform coordinate grids with boundary tags and quadrature weights."""
from dataclasses import dataclass, field

import numpy as np

DIRICHLET = "dirichlet"
PERIODIC = "periodic"


@dataclass(frozen=True)
class Grid1D:
    """Uniform grid on ``[z_min, z_max]``.

    Dirichlet grids carry both walls as nodes (the wave function is pinned
    to zero there) and use trapezoid weights. Periodic grids exclude
    ``z_max`` (it is identified with ``z_min``) and use uniform weights.
    Either way the weights integrate a constant exactly over the domain.
    """

    n_points: int
    z_min: float
    z_max: float
    boundary: str = DIRICHLET
    points: np.ndarray = field(init=False, repr=False, compare=False)
    weights: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n_points < 8:
            raise ValueError("Grid1D needs at least 8 points")
        if not self.z_max > self.z_min:
            raise ValueError("z_max must exceed z_min")
        if self.boundary not in (DIRICHLET, PERIODIC):
            raise ValueError(f"unknown boundary {self.boundary!r}")
        n, length = self.n_points, self.length
        if self.boundary == DIRICHLET:
            h = length / (n - 1)
            pts = self.z_min + h * np.arange(n)
            pts[-1] = self.z_max
            w = np.full(n, h)
            w[0] = w[-1] = 0.5 * h
        else:
            h = length / n
            pts = self.z_min + h * np.arange(n)
            w = np.full(n, h)
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_spacing(cls, z_min, z_max, spacing, boundary=DIRICHLET):
        """Grid whose spacing is ``spacing`` (rounded to fit the interval)."""
        n_int = int(round((z_max - z_min) / spacing))
        n = n_int + 1 if boundary == DIRICHLET else n_int
        return cls(n, float(z_min), float(z_max), boundary)

    @property
    def length(self):
        return self.z_max - self.z_min

    @property
    def spacing(self):
        if self.boundary == DIRICHLET:
            return self.length / (self.n_points - 1)
        return self.length / self.n_points

    @property
    def interior(self):
        """Index slice of the free (non-wall) nodes."""
        return slice(1, -1) if self.boundary == DIRICHLET else slice(None)

    def refined(self):
        """The grid with spacing halved and the same domain (nested nodes)."""
        if self.boundary == DIRICHLET:
            return Grid1D(2 * self.n_points - 1, self.z_min, self.z_max, self.boundary)
        return Grid1D(2 * self.n_points, self.z_min, self.z_max, self.boundary)

    def integrate(self, f):
        return np.sum(self.weights * f, axis=-1)

    def to_dict(self):
        return {"n_points": self.n_points, "z_min": self.z_min,
                "z_max": self.z_max, "boundary": self.boundary}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["n_points"]), float(d["z_min"]), float(d["z_max"]), d["boundary"])


@dataclass(frozen=True)
class Grid3D:
    """Product grid (z_e1, z_e2, R); both electrons share one axis."""

    electron: Grid1D
    nuclear: Grid1D

    def __post_init__(self):
        if self.nuclear.z_min < 0.0:
            raise ValueError("the R axis must lie in R >= 0")
        if self.nuclear.boundary != DIRICHLET:
            raise ValueError("the R axis must be a Dirichlet grid")

    @property
    def axes(self):
        return (self.electron, self.electron, self.nuclear)

    @property
    def shape(self):
        return (self.electron.n_points, self.electron.n_points, self.nuclear.n_points)

    @property
    def total_points(self):
        ne, _, nr = self.shape
        return ne * ne * nr

    def volume_element(self):
        """Broadcastable weight array w_z1 * w_z2 * w_R."""
        we = self.electron.weights
        return we[:, None, None] * we[None, :, None] * self.nuclear.weights[None, None, :]

    def to_dict(self):
        return {"electron": self.electron.to_dict(), "nuclear": self.nuclear.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(Grid1D.from_dict(d["electron"]), Grid1D.from_dict(d["nuclear"]))
