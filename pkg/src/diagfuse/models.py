"""Small trainable networks and the rule-based vCDR diagnoser.

DiagNet is a mask-attentive glaucoma classifier: the image and a 2-channel
(disc, cup) mask are concatenated and pushed through four stride-2 conv
blocks, a per-channel global mean, and a dense layer to one logit.  It is
trained here for evaluation and later held frozen while gradients flow to
whatever produced the mask.

SegNet is a toy encoder-decoder with one skip connection, trained with
per-pixel binary cross-entropy against (possibly soft) fused targets.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import datagen, fusion
from .errors import DataError, NonFiniteError, ShapeMismatchError
from .fileio import load_tns, save_tns


@dataclass(frozen=True)
class DiagArch:
    in_channels: int = 5
    widths: tuple[int, ...] = (8, 16, 32, 32)
    kernel: int = 3


@dataclass(frozen=True)
class SegArch:
    in_channels: int = 3
    base_width: int = 8
    kernel: int = 3


@dataclass
class DiagNet:
    arch: DiagArch
    weights: dict[str, np.ndarray]
    frozen: bool = False

    def freeze(self) -> "DiagNet":
        return replace(self, frozen=True)


@dataclass
class SegNet:
    arch: SegArch
    weights: dict[str, np.ndarray]


def build_diag_net(arch: DiagArch | None = None, seed: int = 0) -> DiagNet:
    arch = arch or DiagArch()
    if any(w < 1 for w in arch.widths):
        raise DataError(f"build_diag_net: widths must be >= 1, got {arch.widths}")
    rng = np.random.default_rng([seed, 0xD1A6])
    k = arch.kernel
    weights: dict[str, np.ndarray] = {}
    cin = arch.in_channels
    for i, cout in enumerate(arch.widths):
        std = np.sqrt(2.0 / (k * k * cin))
        weights[f"conv{i}_w"] = rng.normal(scale=std, size=(k, k, cin, cout))
        weights[f"conv{i}_b"] = np.zeros(cout)
        cin = cout
    weights["fc_w"] = rng.normal(scale=np.sqrt(1.0 / cin), size=(cin, 1))
    weights["fc_b"] = np.zeros(1)
    return DiagNet(arch=arch, weights=weights)


def build_seg_net(arch: SegArch | None = None, seed: int = 0) -> SegNet:
    arch = arch or SegArch()
    rng = np.random.default_rng([seed, 0x5E6])
    k, b = arch.kernel, arch.base_width
    shapes = {
        "enc1_w": (k, k, arch.in_channels, b),
        "enc2_w": (k, k, b, 2 * b),
        "mid_w": (k, k, 2 * b, 2 * b),
        "dec_w": (k, k, 3 * b, b),
        "out_w": (1, 1, b, 2),
    }
    weights: dict[str, np.ndarray] = {}
    for name, shape in shapes.items():
        std = np.sqrt(2.0 / (shape[0] * shape[1] * shape[2]))
        weights[name] = rng.normal(scale=std, size=shape)
        weights[name.replace("_w", "_b")] = np.zeros(shape[3])
    return SegNet(arch=arch, weights=weights)


# ---------------------------------------------------------------------------
# forward passes


def _weights_on_tape(tape: ad.Tape, net, requires_grad: bool) -> dict[str, ad.Tensor]:
    return {
        name: tape.leaf(arr, requires_grad=requires_grad)
        for name, arr in net.weights.items()
    }


def diag_forward_on_tape(
    tape: ad.Tape,
    net: DiagNet,
    image_t: ad.Tensor,
    mask_t: ad.Tensor,
    wts: dict[str, ad.Tensor] | None = None,
) -> ad.Tensor:
    """Scalar glaucoma probability; differentiable in mask and weights."""
    if wts is None:
        wts = _weights_on_tape(tape, net, requires_grad=False)
    x = ad.concat_channels(image_t, mask_t)
    if x.dims[2] != net.arch.in_channels:
        raise ShapeMismatchError("diag_forward", x.dims, f"expected c={net.arch.in_channels}")
    for i in range(len(net.arch.widths)):
        x = ad.relu(ad.bias_add(ad.conv2d(x, wts[f"conv{i}_w"], stride=2), wts[f"conv{i}_b"]))
    feat = ad.global_mean(x)
    logit = ad.bias_add(ad.matmul(ad.reshape(feat, (1, feat.dims[0])), wts["fc_w"]), wts["fc_b"])
    return ad.sigmoid(ad.reshape(logit, ()))


def diag_forward(net: DiagNet, image: np.ndarray, mask: np.ndarray) -> float:
    """Probability for plain arrays (throwaway tape)."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.min() < 0.0 or mask.max() > 1.0:
        raise DataError("diag_forward: mask values must lie in [0, 1]")
    tape = ad.Tape()
    prob = diag_forward_on_tape(tape, net, tape.const(image), tape.const(mask))
    return float(prob.data)


_UP_GRID_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _upsample_grid(oh: int, ow: int) -> np.ndarray:
    # output pixel centres mapped back to half-resolution source coords
    key = (oh, ow)
    if key not in _UP_GRID_CACHE:
        rows = (np.arange(oh) + 0.5) / 2.0 - 0.5
        cols = (np.arange(ow) + 0.5) / 2.0 - 0.5
        _UP_GRID_CACHE[key] = np.stack(np.meshgrid(rows, cols, indexing="ij"), axis=-1)
    return _UP_GRID_CACHE[key]


def seg_forward_on_tape(
    tape: ad.Tape,
    net: SegNet,
    image_t: ad.Tensor,
    wts: dict[str, ad.Tensor] | None = None,
) -> ad.Tensor:
    if wts is None:
        wts = _weights_on_tape(tape, net, requires_grad=False)
    e1 = ad.relu(ad.bias_add(ad.conv2d(image_t, wts["enc1_w"], stride=1), wts["enc1_b"]))
    e2 = ad.relu(ad.bias_add(ad.conv2d(e1, wts["enc2_w"], stride=2), wts["enc2_b"]))
    mid = ad.relu(ad.bias_add(ad.conv2d(e2, wts["mid_w"], stride=1), wts["mid_b"]))
    up = ad.bilinear_resample(mid, _upsample_grid(*image_t.dims[:2]))
    cat = ad.concat_channels(up, e1)
    dec = ad.relu(ad.bias_add(ad.conv2d(cat, wts["dec_w"], stride=1), wts["dec_b"]))
    out = ad.bias_add(ad.conv2d(dec, wts["out_w"], stride=1), wts["out_b"])
    return ad.sigmoid(out)


def seg_predict(net: SegNet, image: np.ndarray) -> np.ndarray:
    tape = ad.Tape()
    return seg_forward_on_tape(tape, net, tape.const(image)).data.copy()


# ---------------------------------------------------------------------------
# mask sources


def mask_from_source(sample: datagen.Sample, source: str) -> np.ndarray:
    """(h, w, 2) float mask for a named source.

    Sources: truth | mv | none | degraded@<iou>.  Degradation is seeded per
    sample (stable across runs).
    """
    h, w = sample.true_disc.shape
    if source == "truth":
        return sample.truth_mask()
    if source == "mv":
        return fusion.majority_vote(sample.annotations)
    if source == "none":
        return np.zeros((h, w, 2))
    if source.startswith("degraded@"):
        try:
            target = float(source.split("@", 1)[1])
        except ValueError as exc:
            raise DataError(f"bad mask source {source!r}") from exc
        seed = zlib.crc32(sample.sample_id.encode()) ^ int(round(target * 1000))
        disc, cup = datagen.degrade_pair(sample.true_disc, sample.true_cup, target, seed)
        return np.stack([disc, cup], axis=-1).astype(np.float64)
    raise DataError(f"unknown mask source {source!r}")


# ---------------------------------------------------------------------------
# training


class Adam:
    """Standard Adam update over a dict of parameter arrays."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)


@dataclass
class DiagTrainHyper:
    lr: float = 1e-4
    batch: int = 16
    epochs: int = 20
    mask_source: str = "mv"
    seed: int = 0


@dataclass
class SegTrainHyper:
    lr: float = 1e-3
    batch: int = 8
    epochs: int = 15
    seed: int = 0


def train_diag(
    net: DiagNet,
    samples: list[datagen.Sample],
    hyper: DiagTrainHyper = DiagTrainHyper(),
    masks: list[np.ndarray] | None = None,
) -> tuple[DiagNet, list[float]]:
    """Adam training on (image ⊕ mask) -> label; returns per-epoch mean loss.

    masks overrides hyper.mask_source with precomputed (h, w, 2) arrays.
    """
    if net.frozen:
        raise DataError("train_diag: net is frozen")
    if not samples:
        raise DataError("train_diag: empty dataset")
    if masks is None:
        masks = [mask_from_source(s, hyper.mask_source) for s in samples]
    return _train_classifier(net, samples, masks, hyper)


def _train_classifier(net, samples, masks, hyper):
    rng = np.random.default_rng([hyper.seed, 0x7EA])
    opt = Adam(net.weights, hyper.lr)
    losses: list[float] = []
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(samples))
        epoch_loss = 0.0
        try:
            for start in range(0, len(order), hyper.batch):
                idx = order[start : start + hyper.batch]
                tape = ad.Tape()
                wts = _weights_on_tape(tape, net, requires_grad=True)
                total = None
                for i in idx:
                    prob = diag_forward_on_tape(
                        tape, net, tape.const(samples[i].image), tape.const(masks[i]), wts
                    )
                    term = ad.bce(prob, tape.const(float(samples[i].label)))
                    total = term if total is None else ad.add(total, term)
                loss = ad.smul(total, 1.0 / len(idx))
                grads = ad.backprop(tape, loss, wrt=list(wts.values()))
                opt.step(net.weights, {k: grads[t.node_id] for k, t in wts.items()})
                epoch_loss += float(loss.data) * len(idx)
        except NonFiniteError as exc:
            raise NonFiniteError(f"training diverged at epoch {epoch}: {exc}") from exc
        losses.append(epoch_loss / len(samples))
    return net, losses


def train_seg(
    samples: list[datagen.Sample],
    gt_dir,
    hyper: SegTrainHyper = SegTrainHyper(),
    arch: SegArch | None = None,
) -> tuple[SegNet, list[float]]:
    """Train the toy segmentation net against a fused ground-truth directory."""
    if not samples:
        raise DataError("train_seg: empty dataset")
    targets = []
    for s in samples:
        gt = fusion.load_fused(gt_dir, s.sample_id)
        if gt.min() < 0.0 or gt.max() > 1.0:
            raise DataError(f"train_seg: ground-truth for {s.sample_id} outside [0, 1]")
        targets.append(gt)
    net = build_seg_net(arch, seed=hyper.seed)
    rng = np.random.default_rng([hyper.seed, 0x5E61])
    opt = Adam(net.weights, hyper.lr)
    losses: list[float] = []
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(samples))
        epoch_loss = 0.0
        try:
            for start in range(0, len(order), hyper.batch):
                idx = order[start : start + hyper.batch]
                tape = ad.Tape()
                wts = _weights_on_tape(tape, net, requires_grad=True)
                total = None
                for i in idx:
                    pred = seg_forward_on_tape(tape, net, tape.const(samples[i].image), wts)
                    term = ad.bce(pred, tape.const(targets[i]))
                    total = term if total is None else ad.add(total, term)
                loss = ad.smul(total, 1.0 / len(idx))
                grads = ad.backprop(tape, loss, wrt=list(wts.values()))
                opt.step(net.weights, {k: grads[t.node_id] for k, t in wts.items()})
                epoch_loss += float(loss.data) * len(idx)
        except NonFiniteError as exc:
            raise NonFiniteError(f"training diverged at epoch {epoch}: {exc}") from exc
        losses.append(epoch_loss / len(samples))
    return net, losses


# ---------------------------------------------------------------------------
# rule-based diagnosis


def vcdr_score(disc: np.ndarray, cup: np.ndarray) -> float:
    """Vertical cup extent over vertical disc extent (inclusive pixel rows).

    Soft inputs are thresholded at 0.5.  Empty cup scores 0; empty disc is
    an error.
    """
    d = np.asarray(disc) > 0.5
    c = np.asarray(cup) > 0.5
    d_rows = np.nonzero(d.any(axis=1))[0]
    if len(d_rows) == 0:
        raise DataError("vcdr_score: empty disc")
    c_rows = np.nonzero(c.any(axis=1))[0]
    if len(c_rows) == 0:
        return 0.0
    return float((c_rows[-1] - c_rows[0] + 1) / (d_rows[-1] - d_rows[0] + 1))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(ckpt_dir, net: DiagNet | SegNet) -> None:
    out = Path(ckpt_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    if isinstance(net, DiagNet):
        lines = [
            "kind=diag",
            f"in_channels={net.arch.in_channels}",
            "widths=" + ",".join(str(w) for w in net.arch.widths),
            f"kernel={net.arch.kernel}",
        ]
    else:
        lines = [
            "kind=seg",
            f"in_channels={net.arch.in_channels}",
            f"base_width={net.arch.base_width}",
            f"kernel={net.arch.kernel}",
        ]
    (out / "arch.txt").write_text("\n".join(lines) + "\n")
    for name, arr in net.weights.items():
        save_tns(out / f"{name}.tns", arr)


def load_checkpoint(ckpt_dir) -> DiagNet | SegNet:
    path = Path(ckpt_dir)
    arch_file = path / "arch.txt"
    if not arch_file.exists():
        raise DataError(f"no arch.txt in checkpoint {path}")
    spec = dict(
        line.split("=", 1) for line in arch_file.read_text().splitlines() if "=" in line
    )
    if spec.get("kind") == "diag":
        arch = DiagArch(
            in_channels=int(spec["in_channels"]),
            widths=tuple(int(w) for w in spec["widths"].split(",")),
            kernel=int(spec["kernel"]),
        )
        net: DiagNet | SegNet = build_diag_net(arch, seed=0)
    elif spec.get("kind") == "seg":
        arch = SegArch(
            in_channels=int(spec["in_channels"]),
            base_width=int(spec["base_width"]),
            kernel=int(spec["kernel"]),
        )
        net = build_seg_net(arch, seed=0)
    else:
        raise DataError(f"{arch_file}: unknown checkpoint kind {spec.get('kind')!r}")
    for name in net.weights:
        tns = path / f"{name}.tns"
        if not tns.exists():
            raise DataError(f"checkpoint missing weight file {tns}")
        net.weights[name] = load_tns(tns)
    return net
