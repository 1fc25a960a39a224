"""End-to-end workflow: dataset construction, training, inference, evaluation.

Dataset layout (``out_dir``)::

    manifest.json
    patches/<volume id>_{input,target,sv4,ed4}.npy   float32 [n, P, P]

Each manifest record points at the four stacks and an ``index`` into them.
Splits are assigned per source volume, never per patch.
"""

from __future__ import annotations

import contextlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import data as octdata
from .classical import ed_octa, sv_octa
from .data import BFrameEnsemble, MultiRepeatVolume, PhantomConfig
from .errors import ConfigError, FormatError, NumericError
from .metrics import MetricReport, evaluate_set
from .model import VetConfig, VetModel
from .nn.functional import mse_loss
from .nn.optim import adam_step, zero_grad
from .preprocess import align_alines, extract_patch_boxes, normalize_frame, register_frames

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "vetocta-manifest"
MANIFEST_VERSION = 1
BASELINE_REPEATS = 4
KINDS = ("input", "target", "sv4", "ed4")
METHODS = ("input", "sv4", "ed4", "vet")


@contextlib.contextmanager
def deterministic_threads(enabled: bool = True):
    """Pin BLAS to one thread so reductions happen in a fixed order."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


# classical OCTA over ensembles --------------------------------------------


def prepare_ensemble(ens: BFrameEnsemble) -> BFrameEnsemble:
    """Frame registration followed by per-A-line alignment (frame 0 is the reference)."""
    if ens.nr < 2:
        return ens
    registered, _ = register_frames(ens)
    return align_alines(registered)


def flow_frame(ens: BFrameEnsemble, algo: str, repeats: int | None = None, k: int = 1, zero_mean: bool = False):
    """Flow from the first ``repeats`` frames of an already prepared ensemble."""
    sub = ens if repeats is None else ens.first(repeats)
    if algo == "sv":
        return sv_octa(sub)
    if algo == "ed":
        return ed_octa(sub, k=k, zero_mean=zero_mean)
    raise ConfigError(f"unknown OCTA algorithm {algo!r} (expected 'sv' or 'ed')")


def process_ensemble(ens: BFrameEnsemble, k: int = 1) -> dict[str, np.ndarray]:
    """Normalized full frames for one slow-axis position.

    ``target`` is ED over all repeats, ``sv4``/``ed4`` the four-repeat
    baselines and ``input`` the single structural frame of repeat 0.
    """
    prepared = prepare_ensemble(ens)
    return {
        "input": normalize_frame(prepared.frames[0]),
        "target": normalize_frame(flow_frame(prepared, "ed", k=k)),
        "sv4": normalize_frame(flow_frame(prepared, "sv", BASELINE_REPEATS)),
        "ed4": normalize_frame(flow_frame(prepared, "ed", BASELINE_REPEATS, k=k)),
    }


def octa_volume(vol: MultiRepeatVolume, algo: str, repeats: int | None = None, k: int = 1, normalize: bool = True):
    """Per-B-frame classical OCTA on the first ``repeats`` repeats; returns ``[y][x][z]``."""
    n = vol.nr if repeats is None else repeats
    if not 2 <= n <= vol.nr:
        raise ConfigError(f"repeats must lie in [2, {vol.nr}], got {n}")
    out = np.empty((vol.ny, vol.nx, vol.nz), dtype=np.float32)
    for y in range(vol.ny):
        prepared = prepare_ensemble(vol.bframe(y).first(n))
        flow = flow_frame(prepared, algo, k=k)
        out[y] = normalize_frame(flow) if normalize else flow
    return out


# dataset -------------------------------------------------------------------


def split_volumes(ids: list[str], val_fraction: float, seed: int) -> tuple[list[str], list[str]]:
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError("val_fraction must lie in [0, 1)")
    if len(ids) < 2 or val_fraction == 0.0:
        return list(ids), []
    n_val = min(max(1, round(len(ids) * val_fraction)), len(ids) - 1)
    order = np.random.default_rng(seed).permutation(len(ids))
    val = sorted(ids[i] for i in order[:n_val])
    train = [i for i in ids if i not in val]
    return train, val


def build_dataset(
    volumes,
    out_dir,
    patch_size: int = 192,
    val_fraction: float = 0.28,
    seed: int = 0,
    k: int = 1,
) -> dict:
    """Turn ``(volume_id, MultiRepeatVolume)`` pairs into patch stacks and a manifest."""
    volumes = list(volumes)
    if not volumes:
        raise ConfigError("no volumes given")
    for vid, vol in volumes:
        if vol.nr < BASELINE_REPEATS:
            raise ConfigError(f"volume {vid} has {vol.nr} repeats; at least {BASELINE_REPEATS} are required")
    ids = [vid for vid, _ in volumes]
    if len(set(ids)) != len(ids):
        raise ConfigError("volume ids must be unique")
    out_dir = Path(out_dir)
    (out_dir / "patches").mkdir(parents=True, exist_ok=True)
    train_ids, val_ids = split_volumes(ids, val_fraction, seed)

    records = []
    for vid, vol in volumes:
        split = "val" if vid in val_ids else "train"
        boxes = extract_patch_boxes(vol.nx, vol.nz, patch_size)
        stacks = {kind: [] for kind in KINDS}
        paths = {kind: f"patches/{vid}_{kind}.npy" for kind in KINDS}
        for y in range(vol.ny):
            frames = process_ensemble(vol.bframe(y), k=k)
            for box in boxes:
                index = len(stacks["input"])
                for kind in KINDS:
                    stacks[kind].append(box.slice(frames[kind]).astype(np.float32))
                records.append(
                    {"source": vid, "y": y, "box": [box.x0, box.z0, box.size], "split": split, "index": index, **paths}
                )
        for kind in KINDS:
            np.save(out_dir / paths[kind], np.stack(stacks[kind]))
        log.info("volume %s: %d patches (%s)", vid, len(stacks["input"]), split)

    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "seed": seed,
        "patch_size": patch_size,
        "k": k,
        "splits": {"train": train_ids, "val": val_ids},
        "volumes": {vid: {"nr": vol.nr, "ny": vol.ny, "nx": vol.nx, "nz": vol.nz} for vid, vol in volumes},
        "records": records,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return manifest


def phantom_volumes(cfg: PhantomConfig, count: int) -> list[tuple[str, MultiRepeatVolume]]:
    """``count`` phantoms with seeds ``cfg.seed, cfg.seed + 1, ...``."""
    out = []
    for i in range(count):
        vol, _ = octdata.make_phantom(PhantomConfig(**{**asdict(cfg), "seed": cfg.seed + i}))
        out.append((f"vol{i:03d}", vol))
    return out


def load_manifest(path) -> tuple[dict, Path]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
    if manifest.get("format") != MANIFEST_FORMAT or manifest.get("version") != MANIFEST_VERSION:
        raise FormatError(f"{path}: not a version {MANIFEST_VERSION} dataset manifest")
    return manifest, path.parent


def load_split(manifest_path, split: str, kinds=KINDS) -> tuple[list[dict], dict[str, np.ndarray]]:
    """Records of one split and their patches, stacked in record order."""
    manifest, root = load_manifest(manifest_path)
    records = [r for r in manifest["records"] if r["split"] == split]
    cache = {}
    arrays = {}
    for kind in kinds:
        rows = []
        for r in records:
            p = r[kind]
            if p not in cache:
                cache[p] = np.load(root / p)
            rows.append(cache[p][r["index"]])
        arrays[kind] = np.stack(rows) if rows else np.zeros((0, manifest["patch_size"], manifest["patch_size"]), np.float32)
    return records, arrays


# training -------------------------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = 4
    epochs: int = 200
    max_steps: int | None = None
    lr: float = 1e-4
    beta1: float = 0.8
    beta2: float = 0.999
    eps: float = 1e-8
    augment: bool = True
    seed: int = 0
    checkpoint_every: int = 0
    deterministic: bool = False
    overfit: bool = False

    def validate(self) -> None:
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1 when given")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


def augment_pair(x: np.ndarray, y: np.ndarray, op: int) -> tuple[np.ndarray, np.ndarray]:
    """Apply one of six joint transforms: identity, h-flip, v-flip, rot90, rot180, rot270."""
    if op == 0:
        f = lambda a: a  # noqa: E731
    elif op == 1:
        f = lambda a: a[:, ::-1]  # noqa: E731
    elif op == 2:
        f = lambda a: a[::-1, :]  # noqa: E731
    else:
        f = lambda a: np.rot90(a, op - 2)  # noqa: E731
    return np.ascontiguousarray(f(x)), np.ascontiguousarray(f(y))


@dataclass
class TrainResult:
    losses: list[tuple[int, int, float]]
    checkpoint: Path
    checkpoints: list[Path] = field(default_factory=list)
    epoch_visits: list[np.ndarray] = field(default_factory=list)


def train(manifest_path, train_cfg: TrainConfig, model_cfg: VetConfig, out_dir) -> TrainResult:
    """Mini-batch Adam on MSE between predicted and ED ground-truth patches.

    Writes ``loss.tsv`` (``step<TAB>epoch<TAB>loss`` per step), periodic
    ``ckpt_epochNNNN.vetw`` files when ``checkpoint_every`` > 0 and the
    final ``vet.vetw``.
    """
    train_cfg.validate()
    model_cfg.validate()
    records, arrays = load_split(manifest_path, "train", kinds=("input", "target"))
    if not records:
        raise ConfigError("training split is empty")
    inputs, targets = arrays["input"], arrays["target"]
    n = len(records)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(train_cfg.seed)
    model = VetModel(model_cfg, seed=train_cfg.seed)
    params = model.parameters()
    dtype = params[0].dtype
    losses = []
    ckpts = []
    visits = []
    step = 0
    done = False
    meta = {"patch_size": int(inputs.shape[1]), "train": asdict(train_cfg)}

    with deterministic_threads(train_cfg.deterministic), open(out_dir / "loss.tsv", "w") as log_fh:
        for epoch in range(train_cfg.epochs):
            if train_cfg.overfit:
                order = np.arange(min(train_cfg.batch_size, n))
            else:
                order = rng.permutation(n)
            counts = np.zeros(n, dtype=np.int64)
            for start in range(0, len(order), train_cfg.batch_size):
                idx = order[start:start + train_cfg.batch_size]
                counts[idx] += 1
                xb, yb = inputs[idx], targets[idx]
                if train_cfg.augment:
                    ops = rng.integers(0, 6, size=len(idx))
                    pairs = [augment_pair(a, b, int(o)) for a, b, o in zip(xb, yb, ops)]
                    xb = np.stack([p[0] for p in pairs])
                    yb = np.stack([p[1] for p in pairs])
                x = xb[..., None].astype(dtype)
                t = yb[..., None].astype(dtype)
                loss = mse_loss(model(x), t)
                value = float(loss.item())
                step += 1
                if not math.isfinite(value):
                    raise NumericError(f"non-finite loss {value} at step {step}", step=step)
                loss.backward()
                adam_step(params, train_cfg.lr, train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
                zero_grad(params)
                losses.append((step, epoch, value))
                log_fh.write(f"{step}\t{epoch}\t{value!r}\n")
                if train_cfg.max_steps is not None and step >= train_cfg.max_steps:
                    done = True
                    break
            visits.append(counts)
            if train_cfg.checkpoint_every and (epoch + 1) % train_cfg.checkpoint_every == 0:
                path = out_dir / f"ckpt_epoch{epoch + 1:04d}.vetw"
                model.save(path, meta)
                ckpts.append(path)
            if done:
                break

    final = out_dir / "vet.vetw"
    model.save(final, meta)
    return TrainResult(losses, final, ckpts, visits)


def read_loss_log(path) -> np.ndarray:
    """``[steps, 3]`` array of (step, epoch, loss)."""
    rows = [line.split("\t") for line in Path(path).read_text().splitlines() if line.strip()]
    return np.array([[float(v) for v in row] for row in rows]).reshape(-1, 3)


# inference ------------------------------------------------------------------


def checkpoint_patch_size(path, default: int = 192) -> int:
    from .model import sidecar_path

    side = sidecar_path(path)
    if side.exists():
        return int(json.loads(side.read_text()).get("patch_size", default))
    return default


def predict_frame(model: VetModel, frame: np.ndarray, patch_size: int) -> np.ndarray:
    """Tile a normalized X-by-Z frame, predict each patch and average overlaps; clamped to [0, 1]."""
    boxes = extract_patch_boxes(frame.shape[0], frame.shape[1], patch_size)
    patches = np.stack([box.slice(frame) for box in boxes])
    preds = model.predict(patches)
    acc = np.zeros(frame.shape, dtype=np.float64)
    cnt = np.zeros(frame.shape, dtype=np.float64)
    for box, pred in zip(boxes, preds):
        box.slice(acc)[...] += pred
        box.slice(cnt)[...] += 1.0
    return np.clip(acc / cnt, 0.0, 1.0).astype(np.float32)


def predict_volume(model: VetModel, vol: MultiRepeatVolume, patch_size: int, repeat: int = 0) -> np.ndarray:
    """Vascular prediction ``[y][x][z]`` from one repeat of a volume."""
    out = np.empty((vol.ny, vol.nx, vol.nz), dtype=np.float32)
    for y in range(vol.ny):
        out[y] = predict_frame(model, normalize_frame(vol.data[repeat, y]), patch_size)
    return out


def write_flow_outputs(flow: np.ndarray, out_dir, stem: str, z_range=None) -> dict[str, Path]:
    """Save a ``[y][x][z]`` flow volume and its MIP enface PNG."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vol_path = out_dir / f"{stem}.octv"
    png_path = out_dir / f"{stem}_enface.png"
    octdata.save_volume(MultiRepeatVolume(flow[None]), vol_path)
    octdata.export_png(octdata.mip_enface(flow, z_range), png_path)
    return {"volume": vol_path, "enface": png_path}


# evaluation -----------------------------------------------------------------


def evaluate(manifest_path, model: VetModel | None = None, predictions_dir=None) -> dict[str, MetricReport]:
    """Metric reports for input, four-repeat baselines and VET against the all-repeat ED target (val split)."""
    records, arrays = load_split(manifest_path, "val")
    if not records:
        raise ConfigError("validation split is empty")
    if model is not None:
        vet = model.predict(arrays["input"])
    elif predictions_dir is not None:
        vet = load_predictions(records, predictions_dir)
    else:
        vet = None
    target = arrays["target"]
    reports = {}
    for method in METHODS:
        if method == "vet":
            if vet is None:
                continue
            preds = vet
        else:
            preds = arrays[method]
        reports[method] = evaluate_set(zip(preds, target))
    return reports


def load_predictions(records, predictions_dir) -> np.ndarray:
    """Per-record predictions from ``<dir>/<volume id>_vet.npy`` stacks indexed like the manifest."""
    root = Path(predictions_dir)
    cache = {}
    rows = []
    for r in records:
        path = root / f"{r['source']}_vet.npy"
        if path not in cache:
            cache[path] = np.load(path) if path.exists() else None
        stack = cache[path]
        if stack is None or r["index"] >= len(stack):
            raise FormatError(f"missing prediction for record source={r['source']} y={r['y']} box={r['box']}")
        rows.append(stack[r["index"]])
    return np.stack(rows)


def reports_to_json(reports: dict[str, MetricReport]) -> str:
    return json.dumps({name: rep.to_dict() for name, rep in reports.items()}, indent=2) + "\n"
