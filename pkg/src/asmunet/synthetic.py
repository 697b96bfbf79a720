"""Procedural branching-duct volumes with biliary-tree class labels.

Geometry is a handful of capsule-swept cubic curves (one per duct class) plus
an ellipsoidal gallbladder, laid out in fractional coordinates of the volume
and jittered per case. The variant number selects how the right-sided ducts
attach to the tree.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import LabelVolume, Volume3D, write_svol

CLASS_NAMES = ("background", "GB", "CD", "CBD", "CHD", "RHD", "RPHD", "RAHD", "LHD")
BG, GB, CD, CBD, CHD, RHD, RPHD, RAHD, LHD = range(9)
N_CLASSES = len(CLASS_NAMES)
HARD_CLASSES = (CD, RHD)
VARIANTS = (0, 1, 2, 3, 4, 5, 6)
# case-mix frequencies used by generate_split; variant 1 dominates
VARIANT_FREQ = {1: 0.45, 2: 0.1, 3: 0.1, 4: 0.1, 5: 0.05, 6: 0.1, 0: 0.1}

MIN_DIM = 16
CONTRAST = 1.0
NOISE_SIGMA = 0.1 * CONTRAST

# anchor points, fractions of (W, H, D)
_ANCHORS = {
    "cbd_start": (0.55, 0.52, 0.05),
    "j_low": (0.50, 0.50, 0.38),
    "j_hilum": (0.50, 0.48, 0.62),
    "lhd_end": (0.88, 0.45, 0.82),
    "j_right": (0.30, 0.50, 0.72),
    "rahd_end": (0.12, 0.28, 0.92),
    "rphd_end": (0.13, 0.74, 0.80),
    "gb_centre": (0.19, 0.44, 0.22),
    "cd_start": (0.29, 0.47, 0.30),
}
_GB_AXES = (0.12, 0.12, 0.14)


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class DuctSpec:
    variant: int = 1
    dims: tuple = (24, 24, 24)
    tube_radius_range: tuple = (1.5, 2.6)
    rng_seed: int = 0
    class_count: int = N_CLASSES

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise GenerationError(f"unknown variant {self.variant}")
        if self.class_count != N_CLASSES:
            raise GenerationError(f"class_count is fixed at {N_CLASSES}")


def _bezier(p0, p1, c0, c1, n=12):
    t = np.linspace(0.0, 1.0, n)[:, None]
    return ((1 - t) ** 3 * p0 + 3 * (1 - t) ** 2 * t * c0
            + 3 * (1 - t) * t ** 2 * c1 + t ** 3 * p1)


def _segment_distance(points, a, b):
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(points - a, axis=-1)
    t = np.clip(((points - a) @ ab) / denom, 0.0, 1.0)
    return np.linalg.norm(points - (a + t[..., None] * ab), axis=-1)


def _polyline_distance(points, poly):
    dist = np.full(points.shape[:-1], np.inf)
    for a, b in zip(poly[:-1], poly[1:]):
        np.minimum(dist, _segment_distance(points, a, b), out=dist)
    return dist


def _topology(variant, pts, rng):
    """Return ``[(class, start, end)]`` duct segments for a variant."""
    def along(p, q, frac):
        return p + frac * (q - p)

    segs = [(CBD, pts["cbd_start"], pts["j_low"]),
            (CHD, pts["j_low"], pts["j_hilum"]),
            (LHD, pts["j_hilum"], pts["lhd_end"]),
            (CD, pts["cd_start"], pts["j_low"])]
    hilum, right = pts["j_hilum"], pts["j_right"]
    if variant in (1, 0):
        segs += [(RHD, hilum, right), (RAHD, right, pts["rahd_end"]),
                 (RPHD, right, pts["rphd_end"])]
    elif variant == 2:
        # trifurcation: RAHD, RPHD and LHD meet at the hilum
        segs += [(RAHD, hilum, pts["rahd_end"]), (RPHD, hilum, pts["rphd_end"])]
    elif variant == 3:
        # RPHD drains into the LHD
        segs += [(RAHD, hilum, pts["rahd_end"]),
                 (RPHD, along(hilum, pts["lhd_end"], 0.3), pts["rphd_end"])]
    elif variant == 4:
        # low insertion of the RPHD into the CHD
        segs += [(RAHD, hilum, pts["rahd_end"]),
                 (RPHD, along(pts["j_low"], hilum, 0.45), pts["rphd_end"])]
    elif variant == 5:
        # RPHD drains into the cystic duct
        segs += [(RAHD, hilum, pts["rahd_end"]),
                 (RPHD, along(pts["cd_start"], pts["j_low"], 0.5), pts["rphd_end"])]
    elif variant == 6:
        # RAHD drains into the LHD; the RHD continues only as the RPHD
        segs += [(RHD, hilum, right), (RPHD, right, pts["rphd_end"]),
                 (RAHD, along(hilum, pts["lhd_end"], 0.35), pts["rahd_end"])]
    return segs


def variant_classes(variant):
    """Foreground classes a variant's topology draws (GB always included)."""
    dummy = {k: np.zeros(3) for k in _ANCHORS}
    return frozenset([GB] + [cls for cls, _, _ in _topology(variant, dummy, None)])


def _merge_fragments(labels, q):
    """Give stray components of a class (all but its largest 26-connected
    component) to the runner-up structure covering them, or background."""
    structure = np.ones((3, 3, 3), dtype=bool)
    for cls in range(1, N_CLASSES):
        comp, n = ndimage.label(labels == cls, structure=structure)
        if n <= 1:
            continue
        sizes = np.bincount(comp.ravel())[1:]
        stray = (comp > 0) & (comp != 1 + int(np.argmax(sizes)))
        alt = q[:, stray].copy()
        alt[cls] = np.inf
        alt[BG] = np.inf
        best = alt.argmin(axis=0)
        labels[stray] = np.where(alt.min(axis=0) <= 1.0, best, BG)


def generate(spec, with_noise=True):
    """Build one ``(Volume3D, LabelVolume)`` case from ``spec``."""
    dims = np.array(spec.dims, dtype=int)
    r_min, r_max = (float(r) for r in spec.tube_radius_range)
    if len(dims) != 3 or dims.min() < MIN_DIM:
        raise GenerationError(f"dims must be at least {MIN_DIM}^3, got {tuple(dims)}")
    if not (1.0 <= r_min <= r_max):
        raise GenerationError(f"radii must satisfy 1 <= min <= max, got {(r_min, r_max)}")
    if r_max > dims.min() / 8:
        raise GenerationError(f"radius {r_max} too large for dims {tuple(dims)}")

    rng = np.random.default_rng(spec.rng_seed)
    jitter = 0.06 if spec.variant == 0 else 0.025
    rng_pts = {k: np.array(v) for k, v in _ANCHORS.items()}
    # draw in sorted key order so the stream is fixed
    pts = {k: (rng_pts[k] + rng.normal(0.0, jitter, 3)) * (dims - 1)
           for k in sorted(rng_pts)}
    # the RHD is kept short: pull its distal end toward the hilum
    shrink = rng.uniform(0.75, 0.95) if spec.variant != 0 else rng.uniform(0.5, 1.0)
    pts["j_right"] = pts["j_hilum"] + shrink * (pts["j_right"] - pts["j_hilum"])

    radii = {c: rng.uniform(0.5 * (r_min + r_max), r_max) for c in (CBD, CHD)}
    span = r_max - r_min
    radii.update({c: rng.uniform(r_min + 0.25 * span, r_min + 0.75 * span)
                  for c in (RPHD, RAHD, LHD)})
    # hard classes sit at the thin end of the range
    radii[RHD] = rng.uniform(r_min + 0.1 * span, r_min + 0.4 * span)
    radii[CD] = r_min

    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims],
                                indexing="ij"), axis=-1)
    # normalised distance per class, <= 1 inside the structure
    q = np.full((N_CLASSES, *dims), np.inf)
    gb_axes = np.array(_GB_AXES) * (dims - 1) * rng.uniform(0.9, 1.1, 3)
    q[GB] = np.linalg.norm((grid - pts["gb_centre"]) / gb_axes, axis=-1)
    # the cystic duct must leave from inside the gallbladder
    e = np.linalg.norm((pts["cd_start"] - pts["gb_centre"]) / gb_axes)
    if e > 0.8:
        pts["cd_start"] = pts["gb_centre"] + (pts["cd_start"] - pts["gb_centre"]) * 0.8 / e
    for cls, p0, p1 in _topology(spec.variant, pts, rng):
        bend = 0.15 * np.linalg.norm(p1 - p0)
        c0 = p0 + (p1 - p0) / 3 + rng.normal(0.0, bend / 2, 3)
        c1 = p0 + 2 * (p1 - p0) / 3 + rng.normal(0.0, bend / 2, 3)
        dist = _polyline_distance(grid, _bezier(p0, p1, c0, c1))
        np.minimum(q[cls], dist / radii[cls], out=q[cls])

    q_min = q.min(axis=0)
    labels = np.where(q_min <= 1.0, q.argmin(axis=0), BG).astype(np.uint8)
    _merge_fragments(labels, q)

    # smooth background + partial-volume tube profile + noise
    u = grid / (dims - 1)
    phase = rng.uniform(0, 2 * np.pi, 3)
    background = 0.2 + 0.1 * np.sin(2 * np.pi * u[..., 0] + phase[0]) \
        * np.cos(np.pi * u[..., 1] + phase[1]) + 0.05 * np.sin(np.pi * u[..., 2] + phase[2])
    r_eff = np.where(q.argmin(axis=0) == GB, gb_axes.min(),
                     np.array([radii.get(c, r_min) for c in range(N_CLASSES)])[q.argmin(axis=0)])
    profile = np.clip((1.0 - q_min) * r_eff + 0.5, 0.0, 1.0)
    signal = background + CONTRAST * profile
    noise = rng.normal(0.0, NOISE_SIGMA, size=tuple(dims))
    image = signal + noise if with_noise else signal
    return (Volume3D(image.astype(np.float32)),
            LabelVolume(labels, n_classes=N_CLASSES))


# --------------------------------------------------------------------------
# Dataset splits


@dataclass(frozen=True)
class CaseEntry:
    case_id: str
    variant: int
    split: str
    seed: int


def split_sizes(n_cases):
    n_train = int(round(0.4 * n_cases))
    n_val = int(round(0.3 * n_cases))
    return n_train, n_val, n_cases - n_train - n_val


def generate_split(n_cases, seed):
    """Deterministic 4:3:3 train/val/test manifest of synthetic cases."""
    if n_cases < 10:
        raise ValueError(f"need at least 10 cases for a 4:3:3 split, got {n_cases}")
    ss = np.random.SeedSequence(seed)
    mix_rng = np.random.default_rng(ss.spawn(1)[0])
    variants = sorted(VARIANT_FREQ)
    probs = np.array([VARIANT_FREQ[v] for v in variants])
    drawn = mix_rng.choice(variants, size=n_cases, p=probs / probs.sum())
    order = mix_rng.permutation(n_cases)
    n_train, n_val, _ = split_sizes(n_cases)
    split_of = {}
    for rank, idx in enumerate(order):
        split_of[int(idx)] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
    case_seeds = np.random.SeedSequence([seed, 7]).generate_state(n_cases, dtype=np.uint64)
    return [CaseEntry(f"{i:03d}", int(drawn[i]), split_of[i], int(case_seeds[i]))
            for i in range(n_cases)]


MANIFEST_NAME = "manifest.txt"


def write_manifest(path, entries, dims, seed):
    lines = ["# asmunet synthetic manifest v1",
             f"# seed={seed} dims={'x'.join(str(d) for d in dims)}",
             "# case_id variant split case_seed"]
    lines += [f"{e.case_id} {e.variant} {e.split} {e.seed}" for e in entries]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path):
    entries = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        case_id, variant, split, seed = line.split()
        if split not in ("train", "val", "test"):
            raise ValueError(f"{path}: bad split {split!r}")
        entries.append(CaseEntry(case_id, int(variant), split, int(seed)))
    return entries


def case_paths(root, case_id):
    root = Path(root)
    return root / f"case_{case_id}_img.svol", root / f"case_{case_id}_lbl.svol"


def write_dataset(out_dir, n_cases, seed, dims=(24, 24, 24), radius_range=(1.5, 2.6)):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = generate_split(n_cases, seed)
    for e in entries:
        img, lbl = generate(DuctSpec(e.variant, tuple(dims), tuple(radius_range), e.seed))
        img_path, lbl_path = case_paths(out, e.case_id)
        write_svol(img_path, img)
        write_svol(lbl_path, lbl)
    write_manifest(out / MANIFEST_NAME, entries, dims, seed)
    return entries
