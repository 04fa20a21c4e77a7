"""Synthetic brain-phantom experiment generator.

Builds a four-region procedural label image (or loads one from PGM), assigns
per-region ground-truth kinetic parameters, simulates dynamic PET data through
the compartment forward model, projects each frame with a Radon transform,
adds Poisson noise in sinogram space, and reconstructs with filtered
backprojection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates

from .kinetics import InputFunction, KineticParams, TimeGrid, model_curve

# Per-region ground-truth rate constants (1/min) and blood volume fractions.
REGION_PARAMS = {
    1: KineticParams(0.100, 0.250, 0.100, 0.020, 0.050),
    2: KineticParams(0.050, 0.150, 0.050, 0.020, 0.030),
    3: KineticParams(0.070, 0.050, 0.100, 0.007, 0.040),
    4: KineticParams(0.080, 0.100, 0.050, 0.007, 0.050),
}

N_REGIONS = 4


@dataclass(frozen=True)
class LabelImage:
    """2D region labels: 0 = background, 1..4 = functional regions."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ValueError("label image must be 2D")
        if lab.min() < 0 or lab.max() > N_REGIONS:
            raise ValueError("labels must lie in 0..4")
        object.__setattr__(self, "labels", lab.astype(np.int32))

    @property
    def side(self) -> int:
        return self.labels.shape[0]

    def region_mask(self, region: int) -> np.ndarray:
        return self.labels == region

    @property
    def foreground(self) -> np.ndarray:
        return self.labels > 0


@dataclass(frozen=True)
class GroundTruth:
    """Per-pixel parameter maps derived from the label image."""

    labels: LabelImage
    region_params: dict = field(default_factory=lambda: dict(REGION_PARAMS))

    def param_maps(self) -> np.ndarray:
        """(4, H, W) maps of k1..k4."""
        lab = self.labels.labels
        maps = np.zeros((4,) + lab.shape)
        for r, p in self.region_params.items():
            m = lab == r
            for i, v in enumerate(p.k):
                maps[i][m] = v
        return maps

    def v_map(self) -> np.ndarray:
        lab = self.labels.labels
        v = np.zeros(lab.shape)
        for r, p in self.region_params.items():
            v[lab == r] = p.V
        return v


@dataclass(frozen=True)
class Sinogram:
    """Line integrals over (angle, detector offset)."""

    data: np.ndarray          # (n_angles, n_offsets)
    angles_deg: np.ndarray
    offsets: np.ndarray       # detector positions in pixel units, centered

    def __post_init__(self):
        if self.data.shape != (len(self.angles_deg), len(self.offsets)):
            raise ValueError("sinogram shape inconsistent with angle/offset lists")


@dataclass
class DynamicImage:
    """Per-pixel time-activity curves plus labels, V map and provenance."""

    data: np.ndarray          # (H, W, N)
    grid: TimeGrid
    labels: LabelImage
    v_map: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return self.data.shape[2]


def _ellipse_mask(side: int, cy: float, cx: float, ry: float, rx: float,
                  angle_deg: float = 0.0) -> np.ndarray:
    y, x = np.mgrid[0:side, 0:side]
    yy = y - cy * side
    xx = x - cx * side
    a = np.deg2rad(angle_deg)
    u = np.cos(a) * xx + np.sin(a) * yy
    v = -np.sin(a) * xx + np.cos(a) * yy
    return (u / (rx * side)) ** 2 + (v / (ry * side)) ** 2 <= 1.0


def make_phantom(side: int = 64) -> LabelImage:
    """Deterministic four-region brain-like phantom.

    Outer cortical band (1), inner bulk (2), two deep nuclei (3), one midline
    structure (4), all inside an elliptical head mask.
    """
    if side < 32:
        raise ValueError("side must be >= 32 to hold all four regions")
    # proportions chosen to keep every region's perimeter-to-area ratio low
    # enough that reconstruction partial-volume effects stay small at 64x64
    lab = np.zeros((side, side), dtype=np.int32)
    outer = _ellipse_mask(side, 0.5, 0.5, 0.49, 0.43)
    inner = _ellipse_mask(side, 0.5, 0.5, 0.37, 0.31)
    lab[outer] = 1
    lab[inner] = 2
    for sx in (-1.0, 1.0):
        nucleus = _ellipse_mask(side, 0.44, 0.5 + sx * 0.11, 0.14, 0.12, angle_deg=10 * sx)
        lab[nucleus & inner] = 3
    midline = _ellipse_mask(side, 0.675, 0.5, 0.135, 0.07)
    lab[midline & inner] = 4
    img = LabelImage(lab)
    for r in range(1, N_REGIONS + 1):
        if not np.any(img.labels == r):
            raise ValueError(f"side {side} too small: region {r} empty")
    return img


def save_pgm(path, labels: np.ndarray, maxval: int = 255) -> None:
    """Binary PGM (P5) writer."""
    arr = np.asarray(labels)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n".encode())
        fh.write(arr.astype(np.uint8).tobytes())


def load_pgm(path) -> np.ndarray:
    """Binary PGM (P5) reader; tolerates comment lines in the header."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(b"P5"):
        raise ValueError("not a binary PGM (P5) file")
    tokens = []
    i = 2
    while len(tokens) < 3:
        while i < len(raw) and raw[i:i + 1].isspace():
            i += 1
        if raw[i:i + 1] == b"#":
            while i < len(raw) and raw[i:i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < len(raw) and not raw[j:j + 1].isspace():
            j += 1
        tokens.append(int(raw[i:j]))
        i = j
    i += 1  # single whitespace after maxval
    w, h, maxval = tokens
    dtype = np.uint8 if maxval < 256 else ">u2"
    return np.frombuffer(raw, dtype=dtype, count=w * h, offset=i).reshape(h, w).astype(np.int32)


def load_label_image(path) -> LabelImage:
    return LabelImage(load_pgm(path))


@dataclass(frozen=True)
class IfShape:
    """Shape of the simulated arterial input function.

    Linear rise to the peak at ``t_peak_min``, then a tri-exponential decay
    whose amplitudes are ``fractions`` of the peak value (must sum to 1 so the
    curve is continuous at the peak).
    """

    t_peak_min: float = 0.5
    fractions: tuple = (0.6, 0.3, 0.1)
    decay_rates_per_min: tuple = (4.0, 0.5, 0.01)

    def __post_init__(self):
        if self.t_peak_min <= 0:
            raise ValueError("t_peak must be positive")
        if any(r <= 0 for r in self.decay_rates_per_min):
            raise ValueError("decay rates must be positive")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError("peak-amplitude fractions must sum to 1 (continuity at the peak)")


def default_if_times(end_min: float = 60.0) -> np.ndarray:
    """Default sampling for the input function: dense early, sparse tail."""
    return np.unique(np.concatenate([
        np.arange(0.0, 2.0001, 0.1),
        np.arange(2.0, 10.0001, 0.5),
        np.arange(10.0, end_min + 1e-9, 2.5),
        [end_min],
    ]))


def input_function(aa_mbq: float = 350.0, vd_liters: float = 12.7,
                   shape: IfShape = IfShape(),
                   times_min: np.ndarray | None = None) -> InputFunction:
    """Simulated arterial input function in kBq/mL.

    Peak value = administered activity / distribution volume (350 MBq / 12.7 L
    ~= 27.56 kBq/mL by default).
    """
    if aa_mbq <= 0 or vd_liters <= 0:
        raise ValueError("activity and distribution volume must be positive")
    peak = aa_mbq * 1000.0 / (vd_liters * 1000.0)  # kBq / mL
    if times_min is None:
        times_min = default_if_times()
    times_min = np.union1d(np.asarray(times_min, dtype=float), [shape.t_peak_min])
    amps = peak * np.asarray(shape.fractions)
    rates = np.asarray(shape.decay_rates_per_min)
    t = times_min
    rise = peak / shape.t_peak_min * t
    decay = (amps[:, None] * np.exp(-rates[:, None] * (t - shape.t_peak_min))).sum(axis=0)
    values = np.where(t <= shape.t_peak_min, rise, decay)
    rise_at_peak = peak
    decay_at_peak = float(amps.sum())
    if abs(rise_at_peak - decay_at_peak) > 1e-9 * peak:
        raise ValueError("input function discontinuous at the peak")
    return InputFunction(times_min, values)


def perturb_if(input_fn: InputFunction, c: float, seed: int) -> InputFunction:
    """Multiplicative Gaussian perturbation Cb*(1 + c*r) per sample, clamped at 0."""
    if c < 0:
        raise ValueError("perturbation level must be >= 0")
    if c == 0:
        return input_fn
    rng = np.random.default_rng(seed)
    r = rng.standard_normal(input_fn.values.size)
    vals = np.maximum(input_fn.values * (1.0 + c * r), 0.0)
    return InputFunction(input_fn.times_min, vals)


def simulate_dynamic(gt: GroundTruth, input_fn: InputFunction, grid: TimeGrid,
                     meta: dict | None = None) -> DynamicImage:
    """Noise-free dynamic image: one forward solve per region, broadcast per pixel."""
    lab = gt.labels.labels
    data = np.zeros(lab.shape + (grid.n,))
    for r, p in gt.region_params.items():
        m = lab == r
        if np.any(m):
            data[m] = model_curve(p, input_fn, grid)
    return DynamicImage(data=data, grid=grid, labels=gt.labels, v_map=gt.v_map(),
                        meta=dict(meta or {}))


def default_angles(n_angles: int = 90) -> np.ndarray:
    return np.arange(n_angles) * (180.0 / n_angles)


def radon(image: np.ndarray, angles_deg: np.ndarray | None = None,
          oversample: int = 4, det_per_pixel: int = 2) -> Sinogram:
    """Radon transform by bilinear-interpolated ray sampling.

    Detector offsets at 1/det_per_pixel pixel pitch across the image (detector
    sampling finer than the pixel grid keeps the reconstruction point spread
    close to one pixel); sample spacing along each ray is 1/oversample pixels.
    """
    img = np.asarray(image, dtype=float)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ValueError("image must be square")
    side = img.shape[0]
    if angles_deg is None:
        angles_deg = default_angles()
    angles_deg = np.asarray(angles_deg, dtype=float)
    center = (side - 1) / 2.0
    pitch = 1.0 / det_per_pixel
    n_det = side * det_per_pixel
    offsets = (np.arange(n_det) - (n_det - 1) / 2.0) * pitch

    step = 1.0 / oversample
    n_steps = int(np.ceil(side * np.sqrt(2) / step)) + 1
    tau = (np.arange(n_steps) - (n_steps - 1) / 2.0) * step

    out = np.empty((angles_deg.size, n_det))
    theta = np.deg2rad(angles_deg)
    for i, th in enumerate(theta):
        n_hat = np.array([np.cos(th), np.sin(th)])   # offset direction (x, y)
        d_hat = np.array([-np.sin(th), np.cos(th)])  # ray direction
        x = offsets[:, None] * n_hat[0] + tau[None, :] * d_hat[0] + center
        y = offsets[:, None] * n_hat[1] + tau[None, :] * d_hat[1] + center
        vals = map_coordinates(img, [y.ravel(), x.ravel()], order=1, mode="constant",
                               cval=0.0).reshape(x.shape)
        out[i] = vals.sum(axis=1) * step
    return Sinogram(out, angles_deg, offsets)


def add_poisson(sino: Sinogram, count_scale: float, seed: int) -> Sinogram:
    """Replace each bin by Poisson(count_scale * value) / count_scale.

    Negative bins (possible after upstream processing) are clamped to zero
    before sampling; the clamp count is recorded on the returned object.
    """
    if count_scale <= 0:
        raise ValueError("count_scale must be positive")
    rng = np.random.default_rng(seed)
    vals = sino.data
    n_clamped = int(np.sum(vals < 0))
    lam = np.maximum(vals, 0.0) * count_scale
    noisy = rng.poisson(lam).astype(float) / count_scale
    out = Sinogram(noisy, sino.angles_deg, sino.offsets)
    object.__setattr__(out, "n_clamped", n_clamped)
    return out


def fbp(sino: Sinogram, apodization: str = "ramp") -> np.ndarray:
    """Filtered backprojection: ramp (optionally Hann-apodized) filter, bilinear backprojection."""
    data = sino.data
    n_angles, n_det = data.shape
    pad = max(64, int(2 ** np.ceil(np.log2(2 * n_det))))
    # discrete Ram-Lak filter built in the spatial domain; sampling 2|f|
    # directly would zero the DC bin and depress the whole reconstruction
    # by several percent
    n = np.arange(pad)
    m = np.minimum(n, pad - n)  # signed sample index, wrapped
    h = np.zeros(pad)
    h[0] = 0.25
    odd = m % 2 == 1
    h[odd] = -1.0 / (np.pi * m[odd]) ** 2
    filt = 2.0 * np.real(np.fft.rfft(h))
    freqs = np.fft.rfftfreq(pad)
    if apodization == "hann":
        filt *= 0.5 * (1.0 + np.cos(2.0 * np.pi * freqs))
    elif apodization != "ramp":
        raise ValueError(f"unknown apodization {apodization!r}")
    # detector pitch: the discrete kernel h carries a 1/pitch^2 factor and the
    # filtered projection a further *pitch from the convolution sum, net 1/pitch
    pitch = float(sino.offsets[1] - sino.offsets[0]) if n_det > 1 else 1.0
    proj_f = np.fft.rfft(data, n=pad, axis=1) * filt[None, :]
    filtered = np.fft.irfft(proj_f, n=pad, axis=1)[:, :n_det] / pitch

    side = int(round(n_det * pitch))
    center = (side - 1) / 2.0
    y, x = np.mgrid[0:side, 0:side]
    xx = x - center
    yy = y - center
    recon = np.zeros((side, side))
    theta = np.deg2rad(sino.angles_deg)
    offset0 = sino.offsets[0]
    for i, th in enumerate(theta):
        s = xx * np.cos(th) + yy * np.sin(th)
        idx = (s - offset0) / pitch
        recon += np.interp(idx.ravel(), np.arange(n_det), filtered[i],
                           left=0.0, right=0.0).reshape(side, side)
    return recon * (np.pi / (2.0 * n_angles))


def project_noise_reconstruct(dyn: DynamicImage, count_scale: float, seed: int,
                              angles_deg: np.ndarray | None = None,
                              apodization: str = "ramp") -> DynamicImage:
    """Per-frame Radon -> Poisson -> FBP chain; one sub-seed per frame.

    ``count_scale`` is interpreted as counts at the maximum sinogram bin over
    the whole acquisition.
    """
    n = dyn.n_frames
    sinos = [radon(dyn.data[:, :, j], angles_deg) for j in range(n)]
    peak = max(s.data.max() for s in sinos)
    scale = count_scale / peak if peak > 0 else count_scale
    ss = np.random.SeedSequence(seed)
    frame_seeds = ss.generate_state(n)
    out = np.empty_like(dyn.data)
    for j in range(n):
        noisy = add_poisson(sinos[j], scale, int(frame_seeds[j]))
        out[:, :, j] = fbp(noisy, apodization=apodization)
    meta = dict(dyn.meta)
    meta.update({"count_scale": count_scale, "noise_seed": seed,
                 "apodization": apodization})
    return DynamicImage(data=out, grid=dyn.grid, labels=dyn.labels,
                        v_map=dyn.v_map, meta=meta)
