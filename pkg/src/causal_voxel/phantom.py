"""Deterministic styled phantom generator: I = G(w, n).

A fixed affine decoder maps an 8-d style vector to nested-ellipsoid brain
geometry: outer brain surface, inner white-matter ellipsoid defining a
grey-matter shell, and a ventricle that may sit off-center along the
anterior-posterior axis. Eight style dimensions drive eight geometric
degrees of freedom through an invertible decoder, so inversion is
well-posed. Geometry is rasterized onto a voxel grid with one-voxel linear
anti-aliased boundaries, and a smoothed exogenous noise field adds
per-subject texture without moving tissue volumes. All constants are
seeded so any two builds agree bitwise.

Tissue intensity bands: background 0, CSF/ventricle 0.25, white matter 0.6,
grey matter 0.85.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.optimize import brentq

from .nets import DenseNet

__all__ = [
    "GridSpec",
    "VoxelGrid",
    "ShapeParams",
    "StyleDecoder",
    "MappingNetwork",
    "PhantomGenerator",
    "Volumes",
    "measure_volumes",
    "estimate_shape",
    "objective_sensitivities",
    "TISSUE_LEVELS",
    "VOLUME_TO_VARIABLE",
    "DECODER_SEED",
]

TISSUE_LEVELS = {"background": 0.0, "csf": 0.25, "white_matter": 0.6, "grey_matter": 0.85}

# half-maximum cuts between adjacent tissue plateaus; these sit in the gaps
# between the +-0.12 bands around each tissue level
CSF_WM_CUT = 0.5 * (TISSUE_LEVELS["csf"] + TISSUE_LEVELS["white_matter"])  # 0.425
WM_GM_CUT = 0.5 * (TISSUE_LEVELS["white_matter"] + TISSUE_LEVELS["grey_matter"])  # 0.725

VOLUME_TO_VARIABLE = {"brain": "b", "gm": "g", "ventricle": "v"}
VARIABLE_TO_VOLUME = {v: k for k, v in VOLUME_TO_VARIABLE.items()}

DECODER_SEED = 20240  # project-wide fixed constant; all decoder/mapping weights derive from it
STYLE_DIM = 8
GEOMETRY_DIM = 8  # brain a,b,c; shell t; ventricle a,b,c; ventricle y-offset

ELLIPSOID_ML = 4.0 * np.pi / 3.0 / 1000.0  # (4/3) pi mm^3 -> ml

_BRAIN_PROPORTIONS = np.array([65.0, 80.0, 62.0])
_VENTRICLE_PROPORTIONS = np.array([1.6, 1.0, 0.8])

# population-mean volumes the zero-style phantom is calibrated to (ml)
CALIBRATION_VOLUMES = {"brain": 1354.0, "gm": 527.0, "ventricle": 41.0}


@dataclass(frozen=True)
class GridSpec:
    """Isotropic voxel grid: dims in voxels, spacing in mm."""

    dims: tuple = (64, 64, 64)
    spacing: float = 3.0

    def __post_init__(self):
        if any(d <= 0 for d in self.dims) or self.spacing <= 0:
            raise ValueError(f"invalid grid spec {self.dims} @ {self.spacing}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", float(self.spacing))

    @property
    def fov(self):
        return tuple(d * self.spacing for d in self.dims)

    @property
    def voxel_volume_ml(self):
        return self.spacing**3 / 1000.0

    def coordinates(self):
        """Voxel-center coordinates (mm), grid centered on the origin."""
        axes = [
            (np.arange(n, dtype=float) + 0.5 - 0.5 * n) * self.spacing for n in self.dims
        ]
        return np.meshgrid(*axes, indexing="ij")


@dataclass
class VoxelGrid:
    """3D scalar image with spacing metadata; intensities live in [0, 1]."""

    data: np.ndarray
    spacing: float

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError(f"expected a 3D array, got shape {self.data.shape}")
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")

    @property
    def dims(self):
        return self.data.shape

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.data.shape, self.spacing)


@dataclass
class ShapeParams:
    """Decoded geometry (mm) plus the fixed tissue intensity levels."""

    brain_axes: np.ndarray
    ventricle_axes: np.ndarray
    shell_thickness: float
    ventricle_offset_y: float = 0.0
    levels: dict = field(default_factory=lambda: dict(TISSUE_LEVELS))
    clamped: bool = False

    @property
    def inner_axes(self):
        return self.brain_axes - self.shell_thickness

    def as_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.brain_axes, [self.shell_thickness], self.ventricle_axes,
             [self.ventricle_offset_y]]
        )


CLAMP_SHARPNESS = 3.0  # softplus beta; margins beyond ~10 mm are exact identities


def _softplus_lower(x, lo):
    return lo + np.logaddexp(0.0, CLAMP_SHARPNESS * (x - lo)) / CLAMP_SHARPNESS


def _softplus_upper(x, hi):
    return hi - np.logaddexp(0.0, CLAMP_SHARPNESS * (hi - x)) / CLAMP_SHARPNESS


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -500, 500)))


def _calibrated_geometry() -> np.ndarray:
    """Geometry vector realizing the calibration volumes exactly, centered."""
    brain_ml = CALIBRATION_VOLUMES["brain"]
    gm_ml = CALIBRATION_VOLUMES["gm"]
    vent_ml = CALIBRATION_VOLUMES["ventricle"]
    brain_axes = _scale_axes(_BRAIN_PROPORTIONS, brain_ml)
    vent_axes = _scale_axes(_VENTRICLE_PROPORTIONS, vent_ml)
    t = _solve_shell(brain_axes, brain_ml - gm_ml)
    return np.concatenate([brain_axes, [t], vent_axes, [0.0]])


def _scale_axes(proportions: np.ndarray, volume_ml: float) -> np.ndarray:
    target = volume_ml / ELLIPSOID_ML  # product of semi-axes in mm^3
    return proportions * (target / np.prod(proportions)) ** (1.0 / 3.0)


def _solve_shell(brain_axes: np.ndarray, inner_ml: float) -> float:
    """Shell thickness t with (a-t)(b-t)(c-t) matching the inner volume."""
    target = inner_ml / ELLIPSOID_ML

    def f(t):
        return float(np.prod(brain_axes - t)) - target

    return brentq(f, 0.0, float(brain_axes.min()) * 0.999, xtol=1e-12, rtol=1e-15)


class StyleDecoder:
    """Fixed affine decoder p = S w + p0 with smooth validity clamping.

    S is a seeded orthogonal matrix scaled by a fixed sensitivity, so
    style-space geometry matches parameter-space geometry, one unit of w
    moves the geometry by ``scale`` millimetres, and the decoder is
    invertible. The softplus clamps keep semi-axes positive, the shell
    thinner than the smallest brain axis, and the (possibly off-center)
    ventricle strictly inside the white matter; in the calibrated operating
    range they are exact identities in float64.
    """

    AXIS_FLOOR = 20.0  # mm
    SHELL_FLOOR = 1.0
    SHELL_CEIL_FRACTION = 0.6
    VENTRICLE_FLOOR = 2.0
    VENTRICLE_CEIL_FRACTION = 0.85
    CONTAINMENT = 0.98  # scaled-norm budget shared by ventricle size and offset

    def __init__(self, style_dim: int = STYLE_DIM, scale: float = 1.5,
                 seed: int = DECODER_SEED):
        if style_dim != GEOMETRY_DIM:
            raise ValueError(
                f"style dim must equal {GEOMETRY_DIM} for an invertible decoder"
            )
        self.style_dim = int(style_dim)
        self.scale = float(scale)
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.normal(size=(self.style_dim, GEOMETRY_DIM)))
        self.matrix = self.scale * q.T  # orthogonal rows, invertible
        self.p0 = _calibrated_geometry()

    def raw_params(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if w.shape != (self.style_dim,):
            raise ValueError(f"style vector must have shape ({self.style_dim},)")
        if not np.all(np.isfinite(w)):
            raise ValueError("style vector must be finite")
        return self.matrix @ w + self.p0

    def decode(self, w: np.ndarray) -> ShapeParams:
        raw = self.raw_params(w)
        brain = _softplus_lower(raw[:3], self.AXIS_FLOOR)
        t = _softplus_lower(raw[3], self.SHELL_FLOOR)
        t = _softplus_upper(t, self.SHELL_CEIL_FRACTION * brain.min())
        inner = brain - t
        vent = _softplus_lower(raw[4:7], self.VENTRICLE_FLOOR)
        vent = _softplus_upper(vent, self.VENTRICLE_CEIL_FRACTION * inner)
        # Minkowski-type containment: scaled ventricle radius plus scaled
        # offset must stay below the budget, so the ventricle cannot poke
        # through the white-matter boundary for any offset direction
        off_bound = (self.CONTAINMENT - np.max(vent / inner)) * inner[1]
        y_off = _softplus_lower(raw[7], -off_bound)
        y_off = _softplus_upper(y_off, off_bound)
        final = np.concatenate([brain, [t], vent, [y_off]])
        clamped = bool(np.max(np.abs(final - raw)) > 1e-9)
        return ShapeParams(
            brain_axes=brain, ventricle_axes=vent, shell_thickness=float(t),
            ventricle_offset_y=float(y_off), clamped=clamped,
        )

    def clamp_slopes(self, w: np.ndarray) -> np.ndarray:
        """d(final param)/d(raw param) along the direct path (off-clamp ~ 1)."""
        beta = CLAMP_SHARPNESS
        raw = self.raw_params(w)
        params = self.decode(w)
        brain, t = params.brain_axes, params.shell_thickness
        inner, vent = params.inner_axes, params.ventricle_axes
        slopes = np.empty(GEOMETRY_DIM)
        slopes[:3] = _sigmoid(beta * (raw[:3] - self.AXIS_FLOOR))
        t1 = _softplus_lower(raw[3], self.SHELL_FLOOR)
        slopes[3] = _sigmoid(beta * (raw[3] - self.SHELL_FLOOR)) * _sigmoid(
            beta * (self.SHELL_CEIL_FRACTION * brain.min() - t1)
        )
        v1 = _softplus_lower(raw[4:7], self.VENTRICLE_FLOOR)
        slopes[4:7] = _sigmoid(beta * (raw[4:7] - self.VENTRICLE_FLOOR)) * _sigmoid(
            beta * (self.VENTRICLE_CEIL_FRACTION * inner - v1)
        )
        off_bound = (self.CONTAINMENT - np.max(vent / inner)) * inner[1]
        o1 = _softplus_lower(raw[7], -off_bound)
        slopes[7] = _sigmoid(beta * (raw[7] + off_bound)) * _sigmoid(
            beta * (off_bound - o1)
        )
        return slopes

    def style_for_params(self, params_vector: np.ndarray) -> np.ndarray:
        """Style vector whose raw decoder output equals params_vector."""
        delta = np.asarray(params_vector, dtype=float) - self.p0
        return np.linalg.solve(self.matrix, delta)

    def style_for_volumes(self, brain_ml: float, gm_ml: float, vent_ml: float) -> np.ndarray:
        """Closed-form style realizing target volumes (calibration-family shapes)."""
        if not 0 < gm_ml < brain_ml:
            raise ValueError(f"need 0 < gm < brain, got gm={gm_ml}, brain={brain_ml}")
        if vent_ml <= 0:
            raise ValueError("ventricle volume must be positive")
        brain_axes = _scale_axes(_BRAIN_PROPORTIONS, brain_ml)
        vent_axes = _scale_axes(_VENTRICLE_PROPORTIONS, vent_ml)
        t = _solve_shell(brain_axes, brain_ml - gm_ml)
        return self.style_for_params(np.concatenate([brain_axes, [t], vent_axes, [0.0]]))

    def to_dict(self) -> dict:
        return {"style_dim": self.style_dim, "scale": self.scale, "seed": self.seed}


class MappingNetwork:
    """Fixed seeded dense network z -> w; never trained."""

    def __init__(self, style_dim: int = STYLE_DIM, seed: int = DECODER_SEED + 1,
                 output_gain: float = 3.0):
        self.style_dim = int(style_dim)
        self.seed = int(seed)
        self.output_gain = float(output_gain)
        self.net = DenseNet([style_dim, 16, 16, style_dim], seed=seed)
        self.net.weights[-1] = self.net.weights[-1] * output_gain
        rng = np.random.default_rng(seed + 1)
        self.net.biases[-1] = rng.normal(0.0, 0.05, size=style_dim)

    def forward(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        squeeze = z.ndim == 1
        z2 = np.atleast_2d(z)
        if z2.shape[1] != self.style_dim:
            raise ValueError(f"latent z must have dimension {self.style_dim}")
        w = self.net.forward(z2)
        return w[0] if squeeze else w

    def to_dict(self) -> dict:
        return {"style_dim": self.style_dim, "seed": self.seed,
                "output_gain": self.output_gain}


class PhantomGenerator:
    """Deterministic generator with analytically known tissue volumes."""

    def __init__(self, grid: GridSpec | None = None, decoder: StyleDecoder | None = None,
                 mapping: MappingNetwork | None = None, noise_sigma_voxels: float = 1.5,
                 noise_amplitude: float = 0.02):
        self.grid = grid or GridSpec()
        self.decoder = decoder or StyleDecoder()
        self.mapping = mapping or MappingNetwork(self.decoder.style_dim)
        self.noise_sigma = float(noise_sigma_voxels)
        self.noise_amplitude = float(noise_amplitude)
        self._coords = None

    @property
    def style_dim(self):
        return self.decoder.style_dim

    def _axis_coords(self):
        """1-D voxel-center coordinates per axis (the grid is separable)."""
        if self._coords is None:
            self._coords = tuple(
                (np.arange(n, dtype=float) + 0.5 - 0.5 * n) * self.grid.spacing
                for n in self.grid.dims
            )
        return self._coords

    def with_grid(self, grid: GridSpec) -> "PhantomGenerator":
        """Same generator constants on a different grid (for multiscale use)."""
        return PhantomGenerator(grid, self.decoder, self.mapping,
                                self.noise_sigma, self.noise_amplitude)

    # -- geometry ------------------------------------------------------------

    def decode_style(self, w) -> ShapeParams:
        return self.decoder.decode(np.asarray(w, dtype=float))

    def analytic_volumes(self, params: ShapeParams) -> "Volumes":
        brain = ELLIPSOID_ML * float(np.prod(params.brain_axes))
        inner = ELLIPSOID_ML * float(np.prod(params.inner_axes))
        vent = ELLIPSOID_ML * float(np.prod(params.ventricle_axes))
        return Volumes(brain=brain, gm=brain - inner, ventricle=vent)

    def volume_jacobian(self, w) -> np.ndarray:
        """Analytic d(brain, gm, ventricle)/dw, valid away from active clamps.

        The ventricle-offset column is zero: position never moves volumes.
        """
        params = self.decode_style(w)
        a, b, c = params.brain_axes
        ai, bi, ci = params.inner_axes
        av, bv, cv = params.ventricle_axes
        dv_dp = np.zeros((3, GEOMETRY_DIM))
        dv_dp[0, :3] = ELLIPSOID_ML * np.array([b * c, a * c, a * b])
        dv_dp[1, :3] = dv_dp[0, :3] - ELLIPSOID_ML * np.array([bi * ci, ai * ci, ai * bi])
        dv_dp[1, 3] = ELLIPSOID_ML * (bi * ci + ai * ci + ai * bi)
        dv_dp[2, 4:7] = ELLIPSOID_ML * np.array([bv * cv, av * cv, av * bv])
        slopes = self.decoder.clamp_slopes(np.asarray(w, dtype=float))
        return dv_dp @ (slopes[:, None] * self.decoder.matrix)

    def match_volumes(self, target: "Volumes", w_start: np.ndarray,
                      max_steps: int = 8, tol: float = 1e-9) -> np.ndarray:
        """Minimal style correction so analytic volumes hit the target.

        Newton iteration with the analytic volume Jacobian; the map is close
        to affine off the clamps, so two or three steps reach tolerance.
        """
        w = np.asarray(w_start, dtype=float).copy()
        goal = np.array([target.brain, target.gm, target.ventricle])
        for _ in range(max_steps):
            current = self.analytic_volumes(self.decode_style(w))
            gap = goal - np.array([current.brain, current.gm, current.ventricle])
            if np.max(np.abs(gap) / np.maximum(np.abs(goal), 1.0)) < tol:
                break
            jac = self.volume_jacobian(w)
            w = w + np.linalg.pinv(jac) @ gap
        return w

    # -- rasterization -------------------------------------------------------

    def _coverage(self, axes: np.ndarray, center=(0.0, 0.0, 0.0)) -> np.ndarray:
        """Fraction-inside estimate per voxel with a one-voxel linear ramp.

        The half-coverage isosurface is exactly the ellipsoid surface, which
        keeps half-maximum volume measurements unbiased. Computed from 1-D
        axis terms broadcast together inside the ellipsoid's bounding box;
        coverage is identically zero outside.
        """
        coords = self._axis_coords()
        margin = self.grid.spacing
        slices, local = [], []
        for x, ax, c in zip(coords, axes, center):
            inside = np.nonzero(np.abs(x - c) <= ax + margin)[0]
            if inside.size == 0:
                return np.zeros(self.grid.dims)
            slices.append(slice(int(inside[0]), int(inside[-1]) + 1))
            local.append(x[inside[0] : inside[-1] + 1] - c)
        (x, y, z), (a, b, c) = local, axes
        rho2 = (
            ((x / a) ** 2)[:, None, None]
            + ((y / b) ** 2)[None, :, None]
            + ((z / c) ** 2)[None, None, :]
        )
        norm2 = (
            ((x / (a * a)) ** 2)[:, None, None]
            + ((y / (b * b)) ** 2)[None, :, None]
            + ((z / (c * c)) ** 2)[None, None, :]
        )
        rho2 -= 1.0
        np.sqrt(norm2, out=norm2)
        norm2 *= 2.0 * self.grid.spacing
        norm2 += 1e-30
        rho2 /= norm2  # signed distance in voxel-spacing units
        box = np.clip(0.5 - rho2, 0.0, 1.0, out=rho2)
        cov = np.zeros(self.grid.dims)
        cov[tuple(slices)] = box
        return cov

    def _check_fits(self, params: ShapeParams) -> None:
        fov = self.grid.fov
        margin = 2.0 * self.grid.spacing
        for axis_name, extent, avail in zip("xyz", 2.0 * params.brain_axes, fov):
            if extent + margin > avail:
                raise ValueError(
                    f"geometry overflows grid along {axis_name}: needs "
                    f"{extent + margin:.1f} mm, field of view is {avail:.1f} mm"
                )

    def rasterize(self, params: ShapeParams) -> np.ndarray:
        """Noiseless tissue image from geometry."""
        self._check_fits(params)
        lv = params.levels
        img = self._coverage(params.brain_axes) * lv["grey_matter"]
        img += self._coverage(params.inner_axes) * (lv["white_matter"] - lv["grey_matter"])
        img += self._coverage(
            params.ventricle_axes, center=(0.0, params.ventricle_offset_y, 0.0)
        ) * (lv["csf"] - lv["white_matter"])
        return img

    # -- noise ---------------------------------------------------------------

    def expand_noise(self, seed: int) -> np.ndarray:
        """Deterministic i.i.d. standard-normal field for a seed."""
        return np.random.default_rng(int(seed)).standard_normal(self.grid.dims)

    def noise_operator(self, n: np.ndarray) -> np.ndarray:
        """A(n): linear Gaussian smoothing then amplitude scaling."""
        n = np.asarray(n, dtype=float)
        if n.shape != self.grid.dims:
            raise ValueError(f"noise shape {n.shape} does not match grid {self.grid.dims}")
        smoothed = ndimage.gaussian_filter(n, sigma=self.noise_sigma, mode="constant")
        return self.noise_amplitude * smoothed

    def _resolve_noise(self, n) -> np.ndarray:
        if n is None:
            return np.zeros(self.grid.dims)
        if np.isscalar(n):
            if n == 0:
                return np.zeros(self.grid.dims)
            return self.expand_noise(int(n))
        return np.asarray(n, dtype=float)

    # -- generation ----------------------------------------------------------

    def generate(self, w, n=None) -> VoxelGrid:
        """I = clamp01(raster(decode(w)) + A(n)); n may be a field, seed, or None."""
        params = self.decode_style(w)
        img = self.rasterize(params)
        noise = self._resolve_noise(n)
        if np.any(noise):
            img = img + self.noise_operator(noise)
        return VoxelGrid(np.clip(img, 0.0, 1.0), self.grid.spacing)

    def sample_style(self, seed: int) -> np.ndarray:
        """w = F(z) with z ~ N(0, I) drawn deterministically from the seed."""
        z = np.random.default_rng(int(seed)).standard_normal(self.style_dim)
        return self.mapping.forward(z)

    def to_dict(self) -> dict:
        return {
            "grid": {"dims": list(self.grid.dims), "spacing": self.grid.spacing},
            "decoder": self.decoder.to_dict(),
            "mapping": self.mapping.to_dict(),
            "noise_sigma_voxels": self.noise_sigma,
            "noise_amplitude": self.noise_amplitude,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomGenerator":
        dec = d["decoder"]
        mp = d["mapping"]
        return cls(
            grid=GridSpec(tuple(d["grid"]["dims"]), d["grid"]["spacing"]),
            decoder=StyleDecoder(dec["style_dim"], dec["scale"], dec["seed"]),
            mapping=MappingNetwork(mp["style_dim"], mp["seed"], mp["output_gain"]),
            noise_sigma_voxels=d["noise_sigma_voxels"],
            noise_amplitude=d["noise_amplitude"],
        )


@dataclass(frozen=True)
class Volumes:
    """Brain / grey-matter / ventricle volumes in ml."""

    brain: float
    gm: float
    ventricle: float

    def as_dict(self) -> dict:
        return {"brain": self.brain, "gm": self.gm, "ventricle": self.ventricle}

    def as_variables(self) -> dict:
        return {VOLUME_TO_VARIABLE[k]: v for k, v in self.as_dict().items()}

    def __getitem__(self, key: str) -> float:
        return self.as_dict()[key]


def _tissue_masks(img: np.ndarray):
    """(brain, inner compartment, ventricle) masks by half-maximum cuts.

    Brain is everything inside the outer half-maximum surface (holes
    filled). The inner white-matter+CSF compartment is the largest connected
    region at or below the WM/GM cut, which excludes the thin outer
    anti-aliasing shell whose blended intensities also pass that cut. The
    ventricle is the sub-CSF/WM-cut portion of that compartment.
    """
    brain = ndimage.binary_fill_holes(img >= CSF_WM_CUT)
    if not brain.any():
        return None, None, None
    inner = _largest_component(brain & (img <= WM_GM_CUT))
    if inner is None:
        return brain, None, None
    inner = ndimage.binary_fill_holes(inner)
    vent = inner & (img < CSF_WM_CUT)
    return brain, inner, vent


def measure_volumes(vox: VoxelGrid) -> Volumes:
    """Tissue volumes by half-maximum thresholded voxel counting.

    Counting is permutation-invariant and an all-zero grid measures
    (0, 0, 0).
    """
    voxel_ml = vox.grid.voxel_volume_ml
    brain, inner, vent = _tissue_masks(vox.data)
    brain_count = int(brain.sum()) if brain is not None else 0
    inner_count = int(inner.sum()) if inner is not None else 0
    vent_count = int(vent.sum()) if vent is not None else 0
    return Volumes(
        brain=brain_count * voxel_ml,
        gm=(brain_count - inner_count) * voxel_ml,
        ventricle=vent_count * voxel_ml,
    )


def estimate_shape(vox: VoxelGrid):
    """Moment-based geometry estimate from an image, or None if degenerate.

    For a solid ellipsoid the second central moment along an axis is
    (semi-axis)^2 / 5, so mask moments recover the eight geometry
    parameters directly; accuracy is a fraction of a voxel, which makes
    this a strong warm start for inversion.
    """
    brain, inner, vent = _tissue_masks(vox.data)
    if brain is None or inner is None or not vent.any():
        return None
    sp = vox.spacing
    coords = [(np.arange(n) + 0.5 - 0.5 * n) * sp for n in vox.dims]

    def axes_and_center(mask):
        idx = np.nonzero(mask)
        pts = [coords[d][idx[d]] for d in range(3)]
        center = np.array([p.mean() for p in pts])
        m2 = np.array([((p - c) ** 2).mean() for p, c in zip(pts, center)])
        return np.sqrt(5.0 * m2), center

    brain_axes, _ = axes_and_center(brain)
    inner_axes, _ = axes_and_center(inner)
    vent_axes, vent_center = axes_and_center(vent)
    thickness = float(np.mean(brain_axes - inner_axes))
    return np.concatenate([brain_axes, [thickness], vent_axes, [vent_center[1]]])


def objective_sensitivities(params: ShapeParams, n_voxels: int) -> np.ndarray:
    """|d(mean L1)/d(geometry param)| from swept-surface volumes.

    Moving a boundary by d sweeps (surface area x d) voxels across an
    intensity jump; normalizing by the voxel count gives the L1 slope per
    millimetre for each geometry parameter, used to condition the
    derivative-free style search.
    """
    lv = params.levels
    jump_outer = lv["grey_matter"] - lv["background"]
    jump_inner = lv["grey_matter"] - lv["white_matter"]
    jump_vent = lv["white_matter"] - lv["csf"]
    a, b, c = params.brain_axes
    ai, bi, ci = params.inner_axes
    av, bv, cv = params.ventricle_axes
    k = 4.0 * np.pi / 3.0
    s = np.empty(GEOMETRY_DIM)
    s[0] = jump_outer * k * b * c + jump_inner * k * bi * ci
    s[1] = jump_outer * k * a * c + jump_inner * k * ai * ci
    s[2] = jump_outer * k * a * b + jump_inner * k * ai * bi
    s[3] = jump_inner * k * (bi * ci + ai * ci + ai * bi)
    s[4] = jump_vent * k * bv * cv
    s[5] = jump_vent * k * av * cv
    s[6] = jump_vent * k * av * bv
    s[7] = jump_vent * 2.0 * np.pi * av * cv  # translation sweep
    return s / float(n_voxels)


def _largest_component(mask: np.ndarray):
    labels, n = ndimage.label(mask)
    if n == 0:
        return None
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    return labels == int(counts.argmax())
