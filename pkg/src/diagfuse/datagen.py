"""Deterministic synthetic stand-in for a multi-rater fundus dataset.

Each sample is a textured background with two nested noisy ellipses: a
bright outer disc and a lower-contrast inner cup.  The vertical cup/disc
ratio drives the binary diagnosis label.  Raters are simulated by
displacing the true boundaries with smooth (low-harmonic) radial noise
plus a systematic cup rim offset, so rater quality is controllable and
known.  Everything is a pure function of seeds.

Masks are star-shaped regions defined by per-angle radius functions,
which keeps containment (cup inside disc) and connectivity easy to
enforce by construction.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics
from .errors import DataError
from .fileio import load_mask, load_tns, save_pgm, save_tns

CHANNELS = 3

# image rendering constants (tuned so masks carry a much cleaner diagnosis
# signal than the raw image does)
_BASE_COLOR = np.array([0.52, 0.34, 0.22])
_DISC_DELTA = np.array([0.22, 0.16, 0.08])
_CUP_DELTA = np.array([0.10, 0.07, 0.02])
_BG_SMOOTH_AMP = 0.05
_PIXEL_NOISE = 0.035
_DISC_EDGE_PX = 1.2
_CUP_EDGE_PX = 2.2
_CDR_MARGIN = 0.05
_TRUTH_BOUNDARY_NOISE_PX = 0.25


@dataclass
class GenConfig:
    h: int = 64
    w: int = 64
    tau_gen: float = 0.6
    glaucoma_frac: float = 0.5


@dataclass
class RaterProfile:
    boundary_noise_px: float
    cup_bias_px: float
    seed_offset: int


@dataclass
class Sample:
    sample_id: str
    image: np.ndarray        # (h, w, 3) float64 in [0, 1]
    true_disc: np.ndarray    # (h, w) uint8
    true_cup: np.ndarray     # (h, w) uint8
    annotations: np.ndarray  # (n_raters, 2, h, w) uint8, channels = (disc, cup)
    label: int
    true_cdr: float
    # generative boundary radii; present on freshly synthesized samples only,
    # lets rater simulation perturb the exact boundaries instead of
    # re-extracting them from the raster
    boundary_cache: dict | None = None

    @property
    def n_raters(self) -> int:
        return self.annotations.shape[0]

    def truth_mask(self) -> np.ndarray:
        """(h, w, 2) float mask with disc, cup channels."""
        return np.stack([self.true_disc, self.true_cup], axis=-1).astype(np.float64)


def default_profiles(n: int = 3) -> list[RaterProfile]:
    """Mildly heterogeneous raters: one careful, the rest noisier and biased."""
    profiles = [RaterProfile(0.8, 0.0, 1)]
    biases = [2.0, -2.0, 3.0, -3.0, 1.0, -1.0]
    for k in range(1, n):
        profiles.append(RaterProfile(1.6, biases[(k - 1) % len(biases)], k + 1))
    return profiles[:n]


# ---------------------------------------------------------------------------
# radial geometry helpers


def _ellipse_radius(theta: np.ndarray, ax: float, ay: float) -> np.ndarray:
    # polar form of an axis-aligned origin-centred ellipse (ax horizontal, ay vertical)
    return ax * ay / np.hypot(ay * np.cos(theta), ax * np.sin(theta))


def _lowpass_noise(rng: np.random.Generator, amplitude_px: float, harmonics: int = 6):
    """Random zero-mean angular signal with unit-free rms == amplitude_px."""
    a = rng.normal(size=harmonics) / np.arange(1, harmonics + 1)
    b = rng.normal(size=harmonics) / np.arange(1, harmonics + 1)
    rms = np.sqrt((a**2 + b**2).sum() / 2.0)
    scale = amplitude_px / rms if rms > 0 else 0.0

    def noise(theta: np.ndarray) -> np.ndarray:
        acc = np.zeros_like(theta)
        for k in range(1, harmonics + 1):
            acc += a[k - 1] * np.cos(k * theta) + b[k - 1] * np.sin(k * theta)
        return acc * scale

    return noise


def _polar_maps(h: int, w: int, cy: float, cx: float):
    yy, xx = np.mgrid[0:h, 0:w]
    dy = yy - cy
    dx = xx - cx
    return np.hypot(dy, dx), np.arctan2(dy, dx)


def _soft_edge(r_map, radius_at_theta, softness):
    z = (radius_at_theta - r_map) / softness
    return 1.0 / (1.0 + np.exp(-np.clip(z, -40.0, 40.0)))


# ---------------------------------------------------------------------------
# sample synthesis


def _bilinear_upsample(grid: np.ndarray, h: int, w: int) -> np.ndarray:
    gh, gw = grid.shape
    rows = np.linspace(0, gh - 1, h)
    cols = np.linspace(0, gw - 1, w)
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    r1 = np.minimum(r0 + 1, gh - 1)
    c1 = np.minimum(c0 + 1, gw - 1)
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[None, :]
    return (
        grid[np.ix_(r0, c0)] * (1 - fr) * (1 - fc)
        + grid[np.ix_(r0, c1)] * (1 - fr) * fc
        + grid[np.ix_(r1, c0)] * fr * (1 - fc)
        + grid[np.ix_(r1, c1)] * fr * fc
    )


def synth_sample(seed: int, config: GenConfig = GenConfig(), sample_id: str | None = None) -> Sample:
    """Render one sample; bit-identical for identical (seed, config)."""
    if config.h < 32 or config.w < 32:
        raise DataError(f"synth_sample: size {config.h}x{config.w} below 32")
    rng = np.random.default_rng([seed, 0x5EED])
    h, w = config.h, config.w

    # geometry: disc and (vertically ratio-tied) cup
    cy = h / 2 + rng.uniform(-2.0, 2.0)
    cx = w / 2 + rng.uniform(-2.0, 2.0)
    disc_ax = rng.uniform(0.27, 0.32) * w
    disc_ay = rng.uniform(0.27, 0.32) * h
    is_glaucoma = rng.random() < config.glaucoma_frac
    if is_glaucoma:
        cdr = rng.uniform(config.tau_gen + _CDR_MARGIN, 0.88)
    else:
        cdr = rng.uniform(0.32, config.tau_gen - _CDR_MARGIN)
    cup_ay = cdr * disc_ay
    cup_ax = min(cdr * disc_ax * rng.uniform(0.92, 1.08), 0.95 * disc_ax)

    disc_wobble = _lowpass_noise(rng, _TRUTH_BOUNDARY_NOISE_PX, harmonics=4)
    cup_wobble = _lowpass_noise(rng, _TRUTH_BOUNDARY_NOISE_PX, harmonics=4)

    r_map, t_map = _polar_maps(h, w, cy, cx)
    disc_r = _ellipse_radius(t_map, disc_ax, disc_ay) + disc_wobble(t_map)
    cup_r = np.minimum(
        _ellipse_radius(t_map, cup_ax, cup_ay) + cup_wobble(t_map), disc_r - 1.0
    )
    true_disc = (r_map <= disc_r).astype(np.uint8)
    true_cup = (r_map <= cup_r).astype(np.uint8)

    # image: textured background + soft-edged structures with jittered contrast
    base = _BASE_COLOR + rng.normal(scale=0.03, size=CHANNELS)
    smooth = _bilinear_upsample(rng.normal(size=(max(h // 8, 2), max(w // 8, 2))), h, w)
    disc_soft = _soft_edge(r_map, disc_r, _DISC_EDGE_PX)
    cup_soft = _soft_edge(r_map, cup_r, _CUP_EDGE_PX)
    disc_gain = rng.uniform(0.9, 1.1)
    cup_gain = rng.uniform(0.6, 1.4)
    image = np.empty((h, w, CHANNELS))
    for c in range(CHANNELS):
        image[..., c] = (
            base[c]
            + _BG_SMOOTH_AMP * smooth
            + disc_gain * _DISC_DELTA[c] * disc_soft
            + cup_gain * _CUP_DELTA[c] * cup_soft
        )
    image += rng.normal(scale=_PIXEL_NOISE, size=image.shape)
    np.clip(image, 0.0, 1.0, out=image)

    return Sample(
        sample_id=sample_id or f"s{seed:06d}",
        image=image,
        true_disc=true_disc,
        true_cup=true_cup,
        annotations=np.zeros((0, 2, h, w), dtype=np.uint8),
        label=int(cdr > config.tau_gen),
        true_cdr=float(cdr),
        boundary_cache={"r_map": r_map, "t_map": t_map, "disc_r": disc_r, "cup_r": cup_r},
    )


def simulate_raters(truth: Sample, profiles: list[RaterProfile], seed: int = 0) -> np.ndarray:
    """Per-rater disc/cup masks: truth boundaries under smooth radial noise.

    The cup rim additionally shifts by the profile's systematic bias and is
    always clipped inside the rater's own disc.
    """
    if not profiles:
        raise DataError("simulate_raters: need at least one profile")
    h, w = truth.true_disc.shape
    if truth.boundary_cache is not None:
        # exact boundaries: a zero-noise, zero-bias profile reproduces truth
        r_map = truth.boundary_cache["r_map"]
        t_map = truth.boundary_cache["t_map"]
        disc_r = truth.boundary_cache["disc_r"]
        cup_r = truth.boundary_cache["cup_r"]
    else:
        # loaded samples: fall back to raster-extracted boundaries
        ys, xs = np.nonzero(truth.true_disc)
        cy, cx = ys.mean(), xs.mean()
        r_map, t_map = _polar_maps(h, w, cy, cx)
        disc_r = _radius_profile(truth.true_disc, cy, cx, t_map)
        cup_r = _radius_profile(truth.true_cup, cy, cx, t_map)

    out = np.zeros((len(profiles), 2, h, w), dtype=np.uint8)
    for i, prof in enumerate(profiles):
        rng = np.random.default_rng([seed, 0xA7E5, prof.seed_offset])
        d_noise = _lowpass_noise(rng, prof.boundary_noise_px)
        c_noise = _lowpass_noise(rng, prof.boundary_noise_px)
        rd = np.maximum(disc_r + d_noise(t_map), 1.5)
        rc = np.maximum(cup_r + c_noise(t_map) + prof.cup_bias_px, 1.0)
        rc = np.minimum(rc, rd - 0.5)
        out[i, 0] = r_map <= rd
        out[i, 1] = r_map <= rc
    return out


def _radius_profile(mask: np.ndarray, cy: float, cx: float, t_map: np.ndarray) -> np.ndarray:
    """Outer-boundary radius of a star-shaped mask, evaluated at each pixel's angle."""
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        raise DataError("radius profile of an empty mask")
    theta = np.arctan2(ys - cy, xs - cx)
    radius = np.hypot(ys - cy, xs - cx)
    bins = 180
    idx = ((theta + np.pi) / (2 * np.pi) * bins).astype(int) % bins
    r_bin = np.full(bins, -np.inf)
    np.maximum.at(r_bin, idx, radius)
    centers = (np.arange(bins) + 0.5) / bins * 2 * np.pi - np.pi
    filled = np.isfinite(r_bin)
    if not filled.all():
        r_bin = np.interp(centers, centers[filled], r_bin[filled], period=2 * np.pi)
    return np.interp(t_map, centers, r_bin + 0.5, period=2 * np.pi)


# ---------------------------------------------------------------------------
# controlled degradation


def _center_component(mask: np.ndarray, cy: float, cx: float) -> np.ndarray:
    """4-connected component containing the foreground pixel nearest (cy, cx)."""
    fg = mask > 0
    if not fg.any():
        return fg.astype(np.uint8)
    ys, xs = np.nonzero(fg)
    nearest = np.argmin((ys - cy) ** 2 + (xs - cx) ** 2)
    reach = np.zeros_like(fg)
    reach[ys[nearest], xs[nearest]] = True
    while True:
        grown = reach.copy()
        grown[1:, :] |= reach[:-1, :]
        grown[:-1, :] |= reach[1:, :]
        grown[:, 1:] |= reach[:, :-1]
        grown[:, :-1] |= reach[:, 1:]
        grown &= fg
        if (grown == reach).all():
            return reach.astype(np.uint8)
        reach = grown


def degrade_mask(
    mask: np.ndarray,
    target_iou: float,
    seed: int,
    max_iter: int = 100,
    clip_to: np.ndarray | None = None,
) -> np.ndarray:
    """Perturb a star-shaped mask until IoU with the input sits within
    ±0.05 of target_iou.

    The boundary radius gets zero-mean low-harmonic angular noise whose
    amplitude is searched (grow, then bisect).  With clip_to given, the
    candidate is intersected with that mask before IoU is measured, so
    containment can be preserved while still hitting the target.
    """
    if not 0.0 < target_iou <= 1.0:
        raise DataError(f"degrade_mask: target_iou {target_iou} outside (0, 1]")
    mask = np.asarray(mask) > 0
    if target_iou == 1.0:
        out = mask.astype(np.uint8)
        return out & (np.asarray(clip_to) > 0) if clip_to is not None else out
    if not mask.any():
        raise DataError("degrade_mask: empty input mask")

    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    cy, cx = ys.mean(), xs.mean()
    r_map, t_map = _polar_maps(h, w, cy, cx)
    base_r = _radius_profile(mask, cy, cx, t_map)
    rng = np.random.default_rng([seed, 0xDE64])
    # few harmonics: the perturbed boundary stays smooth enough that the
    # star-shaped raster remains 4-connected even at large amplitudes
    noise = _lowpass_noise(rng, 1.0, harmonics=3)(t_map)

    def candidate(amp: float) -> np.ndarray:
        m = (r_map <= np.maximum(base_r + amp * noise, 2.0)).astype(np.uint8)
        if clip_to is not None:
            m &= np.asarray(clip_to) > 0
        # frame clipping and near-tangent staircasing can shed fragments
        return _center_component(m, cy, cx)

    lo, hi = 0.0, None
    amp = 1.0
    achieved = 1.0
    for _ in range(max_iter):
        m = candidate(amp)
        achieved = metrics.iou(m, mask)
        if abs(achieved - target_iou) <= 0.045:
            return m
        if achieved > target_iou:
            lo = amp
            amp = amp * 2.0 if hi is None else 0.5 * (amp + hi)
        else:
            hi = amp
            amp = 0.5 * (lo + hi)
    raise DataError(
        f"degrade_mask: could not reach IoU {target_iou} in {max_iter} iterations "
        f"(achieved {achieved:.3f})"
    )


def degrade_pair(
    disc: np.ndarray, cup: np.ndarray, target_iou: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Degrade a disc/cup pair to a target IoU while keeping cup inside disc."""
    bad_disc = degrade_mask(disc, target_iou, seed)
    bad_cup = degrade_mask(cup, target_iou, seed + 1, clip_to=bad_disc)
    return bad_disc, bad_cup


# ---------------------------------------------------------------------------
# datasets


def generate_dataset(
    n_samples: int,
    seed: int,
    config: GenConfig = GenConfig(),
    profiles: list[RaterProfile] | None = None,
) -> list[Sample]:
    if profiles is None:
        profiles = default_profiles()
    samples = []
    for i in range(n_samples):
        sample_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        s = synth_sample(sample_seed, config, sample_id=f"s{i:04d}")
        s.annotations = simulate_raters(s, profiles, seed=sample_seed)
        samples.append(s)
    return samples


def count_components(mask: np.ndarray, connectivity: int = 4) -> int:
    """Number of foreground components (test/validation helper)."""
    mask = np.asarray(mask) > 0
    seen = np.zeros_like(mask, dtype=bool)
    h, w = mask.shape
    steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    if connectivity == 8:
        steps += [(-1, -1), (-1, 1), (1, -1), (1, 1)]
    count = 0
    for sy, sx in zip(*np.nonzero(mask)):
        if seen[sy, sx]:
            continue
        count += 1
        stack = [(sy, sx)]
        seen[sy, sx] = True
        while stack:
            y, x = stack.pop()
            for dy, dx in steps:
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                    seen[ny, nx] = True
                    stack.append((ny, nx))
    return count


def write_dataset(out_dir: str | os.PathLike, samples: list[Sample]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_raters = samples[0].n_raters if samples else 0
    header = ["sample_id", "label", "true_cdr", "image", "truth_disc", "truth_cup"]
    for k in range(n_raters):
        header += [f"rater{k}_disc", f"rater{k}_cup"]
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for s in samples:
            row = [s.sample_id, s.label, f"{s.true_cdr:.6f}"]
            img_name = f"{s.sample_id}_image.tns"
            save_tns(out / img_name, s.image)
            row.append(img_name)
            for name, mask in [("truth_disc", s.true_disc), ("truth_cup", s.true_cup)]:
                fname = f"{s.sample_id}_{name}.pgm"
                save_pgm(out / fname, mask.astype(np.float64))
                row.append(fname)
            for k in range(s.n_raters):
                for ci, ch in enumerate(("disc", "cup")):
                    fname = f"{s.sample_id}_rater{k}_{ch}.pgm"
                    save_pgm(out / fname, s.annotations[k, ci].astype(np.float64))
                    row.append(fname)
            writer.writerow(row)


def load_dataset(data_dir: str | os.PathLike) -> list[Sample]:
    data = Path(data_dir)
    manifest = data / "manifest.csv"
    if not manifest.exists():
        raise DataError(f"no manifest.csv in {data}")
    samples = []
    with open(manifest, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        rater_ids = sorted(
            {int(f[5:].split("_")[0]) for f in fields if f.startswith("rater")}
        )
        for row in reader:
            image = load_tns(data / row["image"])
            disc = load_mask(data / row["truth_disc"])
            cup = load_mask(data / row["truth_cup"])
            ann = np.zeros((len(rater_ids), 2, *disc.shape), dtype=np.uint8)
            for k in rater_ids:
                ann[k, 0] = load_mask(data / row[f"rater{k}_disc"])
                ann[k, 1] = load_mask(data / row[f"rater{k}_cup"])
            samples.append(
                Sample(
                    sample_id=row["sample_id"],
                    image=image,
                    true_disc=disc,
                    true_cup=cup,
                    annotations=ann,
                    label=int(row["label"]),
                    true_cdr=float(row["true_cdr"]),
                )
            )
    return samples


def load_profiles(path: str | os.PathLike) -> list[RaterProfile]:
    """Rater profiles from a JSON list of objects."""
    with open(path) as fh:
        raw = json.load(fh)
    try:
        return [
            RaterProfile(
                boundary_noise_px=float(p["boundary_noise_px"]),
                cup_bias_px=float(p["cup_bias_px"]),
                seed_offset=int(p["seed_offset"]),
            )
            for p in raw
        ]
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: bad profile entry ({exc})") from exc
