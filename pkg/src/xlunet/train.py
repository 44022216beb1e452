"""Training, checkpointing, prediction and case evaluation.

A run is described by a ``RunConfig`` (JSON on disk, strictly validated:
unknown keys and wrong types are errors naming the field).  Training is
deterministic end to end for a fixed config: three independent RNG streams
are derived from the run seed (spawn key 0 = parameter init, 1 = patch
sampling, 2 = mirror augmentation), every checkpoint stores the exact
generator states, and resuming reproduces the uninterrupted run bit for bit.
The train log's wall-clock column is the one deliberately nondeterministic
artifact.

Checkpoints are directories: a ``manifest.json`` (sorted keys, no
timestamps) holding the config, counters, RNG states and a name->file map,
plus one tensor file per parameter and optimizer moment.  ``latest/`` is
written every epoch and ``best/`` tracks the lowest epoch-mean training
loss.
"""

from __future__ import annotations

import itertools
import json
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import (
    DatasetInfo,
    load_case,
    load_dataset,
    read_xten,
    sample_patch,
    write_xten,
)
from .losses import LossConfig, dice_ce_loss
from .metrics import (
    METRIC_NAMES,
    dice_coefficient,
    evaluate_case,
    write_aggregate_csv,
    write_case_jsonl,
)
from .network import Network, NetworkConfig, build_network
from .optim import AdamWConfig, AdamWState, adamw_step, init_adamw, lr_schedule
from .tensor import ContractError, Graph, NumericsError, Tensor, backward

__all__ = [
    "RunConfig",
    "TrainResult",
    "load_run_config",
    "run_training",
    "save_checkpoint",
    "load_checkpoint",
    "restore_network",
    "predict_volume",
    "run_eval",
]

_CKPT_FORMAT = "xlunet-checkpoint-v1"


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    patch_size: tuple[int, ...]
    num_classes: int
    in_channels: int = 1
    variant: str = "enc"
    num_stages: int = 4
    base_channels: int = 8
    channel_cap: int = 64
    heads: int = 4
    expansion: int = 2
    conv_width: int = 4
    batch_size: int = 4
    max_epochs: int = 100
    steps_per_epoch: int = 10
    learning_rate: float = 0.005
    schedule: str = "poly"
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    force_foreground_prob: float = 0.5
    augment_mirror: bool = False
    include_background_dice: bool = False
    class_weights: tuple[float, ...] | None = None
    early_stop_dice: float | None = None
    early_stop_interval: int = 10
    seed: int = 0

    def __post_init__(self):
        self.patch_size = tuple(int(p) for p in self.patch_size)
        if self.class_weights is not None:
            self.class_weights = tuple(float(w) for w in self.class_weights)

    def validate(self) -> None:
        self.network_config().validate()
        self.adamw_config().validate()
        for name in ("batch_size", "max_epochs", "steps_per_epoch", "early_stop_interval"):
            if getattr(self, name) < 1:
                raise ContractError(f"RunConfig.{name} must be >= 1, got {getattr(self, name)}")
        if self.schedule not in ("poly", "const"):
            raise ContractError(f"RunConfig.schedule must be 'poly' or 'const', got {self.schedule!r}")
        if not 0.0 <= self.force_foreground_prob <= 1.0:
            raise ContractError(
                f"RunConfig.force_foreground_prob must be in [0, 1], got {self.force_foreground_prob}"
            )
        if self.early_stop_dice is not None and not 0.0 < self.early_stop_dice <= 1.0:
            raise ContractError(
                f"RunConfig.early_stop_dice must be in (0, 1], got {self.early_stop_dice}"
            )
        self.loss_config().validate(self.num_classes)

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(
            in_channels=self.in_channels,
            num_classes=self.num_classes,
            patch_size=self.patch_size,
            num_stages=self.num_stages,
            base_channels=self.base_channels,
            channel_cap=self.channel_cap,
            variant=self.variant,
            heads=self.heads,
            expansion=self.expansion,
            conv_width=self.conv_width,
            seed=self.seed,
        )

    def adamw_config(self) -> AdamWConfig:
        return AdamWConfig(
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.adam_eps,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(
            include_background=self.include_background_dice,
            class_weights=self.class_weights,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch_size"] = list(self.patch_size)
        if self.class_weights is not None:
            d["class_weights"] = list(self.class_weights)
        return d


_FIELD_TYPES = {
    "patch_size": (list, tuple),
    "num_classes": int,
    "in_channels": int,
    "variant": str,
    "num_stages": int,
    "base_channels": int,
    "channel_cap": int,
    "heads": int,
    "expansion": int,
    "conv_width": int,
    "batch_size": int,
    "max_epochs": int,
    "steps_per_epoch": int,
    "learning_rate": (int, float),
    "schedule": str,
    "weight_decay": (int, float),
    "beta1": (int, float),
    "beta2": (int, float),
    "adam_eps": (int, float),
    "force_foreground_prob": (int, float),
    "augment_mirror": bool,
    "include_background_dice": bool,
    "class_weights": (list, tuple, type(None)),
    "early_stop_dice": (int, float, type(None)),
    "early_stop_interval": int,
    "seed": int,
}
_REQUIRED_FIELDS = ("patch_size", "num_classes")


def run_config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ContractError(f"run config must be a JSON object, got {type(raw).__name__}")
    unknown = set(raw) - set(_FIELD_TYPES)
    if unknown:
        raise ContractError(f"run config: unknown keys {sorted(unknown)}")
    missing = [k for k in _REQUIRED_FIELDS if k not in raw]
    if missing:
        raise ContractError(f"run config: missing required keys {missing}")
    for key, value in raw.items():
        expected = _FIELD_TYPES[key]
        if isinstance(value, bool) and expected is int:
            raise ContractError(f"run config: field {key!r} must be an integer, got a bool")
        if not isinstance(value, expected):
            raise ContractError(
                f"run config: field {key!r} has type {type(value).__name__}, expected {expected}"
            )
    cfg = RunConfig(**raw)
    cfg.validate()
    return cfg


def load_run_config(path) -> RunConfig:
    with open(path) as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ContractError(f"{path}: not valid JSON ({e})") from e
    return run_config_from_dict(raw)


# ---------------------------------------------------------------------------
# checkpoints


def _rng_stream(seed: int, key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(key,)))


def save_checkpoint(
    ckpt_dir,
    net: Network,
    opt_state: AdamWState,
    cfg: RunConfig,
    epochs_completed: int,
    global_step: int,
    best_loss: float,
    rng_states: dict,
) -> None:
    ckpt_dir = Path(ckpt_dir)
    arrays = ckpt_dir / "arrays"
    arrays.mkdir(parents=True, exist_ok=True)
    param_files: dict[str, str] = {}
    avg_files: dict[str, str] = {}
    sq_files: dict[str, str] = {}
    for i, (name, p) in enumerate(net.params.items()):
        rel = f"arrays/p_{i:04d}.xten"
        write_xten(ckpt_dir / rel, p.data)
        param_files[name] = rel
        rel_m = f"arrays/m_{i:04d}.xten"
        write_xten(ckpt_dir / rel_m, opt_state.exp_avg[name])
        avg_files[name] = rel_m
        rel_v = f"arrays/v_{i:04d}.xten"
        write_xten(ckpt_dir / rel_v, opt_state.exp_avg_sq[name])
        sq_files[name] = rel_v
    manifest = {
        "format": _CKPT_FORMAT,
        "config": cfg.to_dict(),
        "epochs_completed": epochs_completed,
        "global_step": global_step,
        "best_loss": best_loss,
        "rng": rng_states,
        "params": param_files,
        "optim": {
            "step_count": opt_state.step_count,
            "exp_avg": avg_files,
            "exp_avg_sq": sq_files,
        },
    }
    with open(ckpt_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_checkpoint(ckpt_dir) -> dict:
    ckpt_dir = Path(ckpt_dir)
    manifest_path = ckpt_dir / "manifest.json"
    if not manifest_path.exists():
        raise ContractError(f"{ckpt_dir}: no manifest.json — not a checkpoint directory")
    with open(manifest_path) as f:
        manifest = json.load(f)
    if manifest.get("format") != _CKPT_FORMAT:
        raise ContractError(
            f"{ckpt_dir}: unsupported checkpoint format {manifest.get('format')!r}"
        )
    manifest["_dir"] = ckpt_dir
    return manifest


def restore_network(manifest: dict) -> tuple[Network, RunConfig]:
    """Rebuild the network described by a checkpoint and load its weights."""
    cfg = run_config_from_dict(manifest["config"])
    net = build_network(cfg.network_config())
    ckpt_dir = manifest["_dir"]
    stored = manifest["params"]
    if set(stored) != set(net.params):
        raise ContractError("checkpoint parameters do not match the configured network")
    for name, rel in stored.items():
        arr = read_xten(ckpt_dir / rel)
        if arr.shape != net.params[name].shape:
            raise ContractError(
                f"checkpoint parameter {name!r} has shape {arr.shape},"
                f" network expects {net.params[name].shape}"
            )
        net.params[name].data = arr.astype(np.float32, copy=False)
    return net, cfg


def _restore_opt_state(manifest: dict, net: Network) -> AdamWState:
    ckpt_dir = manifest["_dir"]
    optim = manifest["optim"]
    state = AdamWState(step_count=int(optim["step_count"]))
    for name in net.params:
        state.exp_avg[name] = read_xten(ckpt_dir / optim["exp_avg"][name])
        state.exp_avg_sq[name] = read_xten(ckpt_dir / optim["exp_avg_sq"][name])
    return state


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    epochs_completed: int
    global_step: int
    final_epoch_loss: float
    best_loss: float
    stopped_early: bool
    out_dir: Path


def _load_all_cases(info: DatasetInfo) -> list[tuple[np.ndarray, np.ndarray]]:
    return [load_case(info, case_id) for case_id in info.cases]


def _mirror(image: np.ndarray, label: np.ndarray, rng: np.random.Generator):
    for axis in range(label.ndim):
        if rng.random() < 0.5:
            image = np.flip(image, axis=axis + 1)
            label = np.flip(label, axis=axis)
    return image.copy(), label.copy()


def _mean_foreground_dice(net: Network, cases, num_classes: int) -> float:
    scores = []
    for image, label in cases:
        pred = predict_volume(net, image, tile=False)
        for cls in range(1, num_classes):
            scores.append(dice_coefficient(pred == cls, label == cls))
    return float(np.mean(scores))


def run_training(
    cfg: RunConfig,
    data_dir,
    out_dir,
    resume_from=None,
    log=None,
) -> TrainResult:
    """Train per ``cfg`` on the dataset at ``data_dir``; artifacts go to
    ``out_dir`` (train_log.csv, checkpoints/latest, checkpoints/best)."""
    cfg.validate()
    info = load_dataset(data_dir)
    if info.classes != cfg.num_classes:
        raise ContractError(
            f"dataset has {info.classes} classes but config says {cfg.num_classes}"
        )
    if info.in_channels != cfg.in_channels:
        raise ContractError(
            f"dataset has {info.in_channels} channels but config says {cfg.in_channels}"
        )
    if info.dims != len(cfg.patch_size):
        raise ContractError(
            f"dataset is {info.dims}-d but patch_size {cfg.patch_size} is {len(cfg.patch_size)}-d"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cases = _load_all_cases(info)

    sampling_rng = _rng_stream(cfg.seed, 1)
    augment_rng = _rng_stream(cfg.seed, 2)
    opt_cfg = cfg.adamw_config()
    loss_cfg = cfg.loss_config()

    if resume_from is not None:
        manifest = load_checkpoint(resume_from)
        stored_cfg = run_config_from_dict(manifest["config"])
        if stored_cfg != cfg:
            raise ContractError(
                "resume: run config does not match the checkpoint's"
                " (omit --config or pass the identical file)"
            )
        net, _ = restore_network(manifest)
        opt_state = _restore_opt_state(manifest, net)
        sampling_rng.bit_generator.state = manifest["rng"]["sampling"]
        augment_rng.bit_generator.state = manifest["rng"]["augment"]
        start_epoch = int(manifest["epochs_completed"])
        global_step = int(manifest["global_step"])
        best_loss = float(manifest["best_loss"])
        log_mode = "a"
    else:
        net = build_network(cfg.network_config())
        opt_state = init_adamw(net.params)
        start_epoch = 0
        global_step = 0
        best_loss = float("inf")
        log_mode = "w"

    log_path = out_dir / "train_log.csv"
    stopped_early = False
    epoch_loss = float("nan")
    with open(log_path, log_mode) as log_file:
        if log_mode == "w":
            log_file.write("step,epoch,lr,loss,seconds\n")
        for epoch in range(start_epoch, cfg.max_epochs):
            lr = lr_schedule(epoch, cfg.learning_rate, cfg.max_epochs, cfg.schedule)
            losses = []
            for _ in range(cfg.steps_per_epoch):
                t0 = time.perf_counter()
                images = []
                labels = []
                for _ in range(cfg.batch_size):
                    case_idx = int(sampling_rng.integers(len(cases)))
                    image, label = cases[case_idx]
                    patch_img, patch_lab = sample_patch(
                        image, label, cfg.patch_size, sampling_rng, cfg.force_foreground_prob
                    )
                    if cfg.augment_mirror:
                        patch_img, patch_lab = _mirror(patch_img, patch_lab, augment_rng)
                    images.append(patch_img)
                    labels.append(patch_lab)
                batch = Tensor(np.stack(images).astype(np.float32, copy=False))
                target = np.stack(labels)
                try:
                    with Graph() as graph:
                        probs = net.forward(batch)
                        loss = dice_ce_loss(probs, target, loss_cfg)
                    backward(loss, graph)
                    loss_value = float(loss.item())
                    adamw_step(net.params, opt_state, opt_cfg, lr=lr)
                except NumericsError as e:
                    raise RuntimeError(
                        f"training aborted at step {global_step + 1}: {e}"
                    ) from e
                net.zero_grad()
                global_step += 1
                losses.append(loss_value)
                seconds = time.perf_counter() - t0
                log_file.write(
                    f"{global_step},{epoch},{lr:.8g},{loss_value:.8g},{seconds:.4f}\n"
                )
            log_file.flush()
            epoch_loss = float(np.mean(losses))
            rng_states = {
                "sampling": sampling_rng.bit_generator.state,
                "augment": augment_rng.bit_generator.state,
            }
            if epoch_loss < best_loss:
                best_loss = epoch_loss
                save_checkpoint(
                    out_dir / "checkpoints" / "best",
                    net, opt_state, cfg, epoch + 1, global_step, best_loss, rng_states,
                )
            save_checkpoint(
                out_dir / "checkpoints" / "latest",
                net, opt_state, cfg, epoch + 1, global_step, best_loss, rng_states,
            )
            if log is not None:
                log(f"epoch {epoch + 1}/{cfg.max_epochs}: lr={lr:.3g} loss={epoch_loss:.4f}")
            if (
                cfg.early_stop_dice is not None
                and (epoch + 1) % cfg.early_stop_interval == 0
            ):
                score = _mean_foreground_dice(net, cases, cfg.num_classes)
                if log is not None:
                    log(f"epoch {epoch + 1}: train foreground dice {score:.4f}")
                if score >= cfg.early_stop_dice:
                    stopped_early = True
                    return TrainResult(
                        epoch + 1, global_step, epoch_loss, best_loss, True, out_dir
                    )
    return TrainResult(
        max(start_epoch, cfg.max_epochs),
        global_step,
        epoch_loss,
        best_loss,
        stopped_early,
        out_dir,
    )


# ---------------------------------------------------------------------------
# prediction


def _tiled_probs(net: Network, image: np.ndarray) -> np.ndarray:
    """Sliding-window class probabilities with half-patch stride and
    mean-probability stitching; windows clamp to the volume edge."""
    patch = net.config.patch_size
    sp = image.shape[1:]
    pads = [max(0, p - n) for p, n in zip(patch, sp)]
    before = [d // 2 for d in pads]
    if any(pads):
        pairs = [(b, d - b) for b, d in zip(before, pads)]
        image = np.pad(image, [(0, 0)] + pairs)
    padded_sp = image.shape[1:]

    starts_per_axis = []
    for n, p in zip(padded_sp, patch):
        stride = max(1, p // 2)
        starts = list(range(0, n - p + 1, stride))
        if starts[-1] != n - p:
            starts.append(n - p)
        starts_per_axis.append(starts)

    k = net.config.num_classes
    acc = np.zeros((k,) + padded_sp, dtype=np.float64)
    count = np.zeros(padded_sp, dtype=np.float64)
    for corner in itertools.product(*starts_per_axis):
        sl = tuple(slice(c, c + p) for c, p in zip(corner, patch))
        window = image[(slice(None),) + sl][None]
        probs = net.forward(Tensor(window)).data[0]
        acc[(slice(None),) + sl] += probs
        count[sl] += 1.0
    probs = acc / count
    core = tuple(slice(b, b + n) for b, n in zip(before, sp))
    return probs[(slice(None),) + core]


def predict_volume(net: Network, image: np.ndarray, tile: bool = False) -> np.ndarray:
    """Segment one (C, *spatial) volume into int32 labels.

    Without ``tile`` the volume goes through the network whole, which needs
    every spatial dim to be a multiple of the network's downsampling factor;
    with ``tile`` a half-patch-stride sliding window averages probabilities.
    """
    image = np.asarray(image, dtype=np.float32)
    rank = len(net.config.patch_size)
    if image.ndim != rank + 1 or image.shape[0] != net.config.in_channels:
        raise ContractError(
            f"predict_volume: expected ({net.config.in_channels}, *spatial[{rank}]),"
            f" got {image.shape}"
        )
    if tile:
        probs = _tiled_probs(net, image)
    else:
        divisor = 2 ** (net.config.num_stages + 1)
        if any(n % divisor != 0 or n < divisor for n in image.shape[1:]):
            raise ContractError(
                f"predict_volume: spatial dims {image.shape[1:]} are not multiples of"
                f" {divisor}; use tile=True (--tile) for arbitrary volumes"
            )
        probs = net.forward(Tensor(image[None])).data[0]
    return np.argmax(probs, axis=0).astype(np.int32)


# ---------------------------------------------------------------------------
# evaluation over prediction/label directories


def run_eval(
    pred_dir,
    gt_dir,
    out_path,
    metrics=METRIC_NAMES,
    tolerance: float = 1.0,
    iou_threshold: float = 0.5,
    stderr=None,
) -> int:
    """Score every ``<case>.xten`` in ``gt_dir`` against ``pred_dir``.

    Writes per-case JSON lines to ``out_path`` and the aggregate CSV next to
    it (suffix swapped to .csv).  Missing predictions are reported to stderr
    and excluded; their presence makes the exit code 1.
    """
    stderr = stderr if stderr is not None else sys.stderr
    pred_dir = Path(pred_dir)
    gt_dir = Path(gt_dir)
    out_path = Path(out_path)
    gt_files = sorted(gt_dir.glob("*.xten"))
    if not gt_files:
        raise ContractError(f"{gt_dir}: no .xten label files found")
    pairs = {}
    missing = []
    for gt_file in gt_files:
        pred_file = pred_dir / gt_file.name
        if not pred_file.exists():
            missing.append(gt_file.stem)
            continue
        pairs[gt_file.stem] = (read_xten(pred_file), read_xten(gt_file))
    if not pairs:
        raise ContractError(f"{pred_dir}: no predictions matched the label files")
    num_classes = 0
    for pred, gt in pairs.values():
        num_classes = max(num_classes, int(pred.max()) + 1, int(gt.max()) + 1)
    num_classes = max(num_classes, 2)
    results = {
        case_id: evaluate_case(pred, gt, num_classes, metrics, tolerance, iou_threshold)
        for case_id, (pred, gt) in pairs.items()
    }
    write_case_jsonl(out_path, results)
    csv_path = out_path.with_suffix(".csv")
    if csv_path == out_path:
        csv_path = out_path.with_name(out_path.name + ".csv")
    write_aggregate_csv(csv_path, results, metrics)
    if missing:
        print(
            f"warning: {len(missing)} case(s) had no prediction and were excluded:"
            f" {', '.join(missing)}",
            file=stderr,
        )
        return 1
    return 0
