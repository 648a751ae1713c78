"""Run orchestration: turns request models into engine calls and files.

Both the FastAPI handlers and the CLI's local dispatch call these functions,
so one code path produces checkpoints, CSVs, and metadata records. Every run
writes a run_meta.json (config hash, seed, versions) next to its outputs;
reruns with equal metadata produce byte-equal results.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .decoder import count_params, init_params
from .episodes import all_test_fold, evaluate, load_episode, make_folds, predict_kshot, sample_episode_spec, train
from .errors import ConfigError, FormatError
from .knowledge import averaged_activation_map, build_text_activation, build_vision_correlations, mask_support_features
from .metrics import miou
from .service.models import (
    EvalResponse,
    ParamsRequest,
    ParamsResponse,
    PredictResponse,
    RunConfig,
    SynthRequest,
    SynthResponse,
    TrainResponse,
    VizResponse,
)
from .store import FeatureStore, generate_synthetic, write_pgm, write_tensor


def config_hash(model) -> str:
    doc = json.dumps(model.model_dump(), sort_keys=True, separators=(",", ":"))
    return "sha256:" + hashlib.sha256(doc.encode()).hexdigest()


def _write_meta(out_dir: Path, command: str, model) -> str:
    meta = {
        "command": command,
        "config": model.model_dump(),
        "config_hash": config_hash(model),
        "seed": getattr(model, "seed", None),
        "versions": {"fewseg": __version__, "numpy": np.__version__},
    }
    path = out_dir / "run_meta.json"
    path.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return str(path)


def _open_store(manifest_path) -> FeatureStore:
    if not Path(manifest_path).exists():
        raise FormatError(f"manifest not found: {manifest_path}")
    return FeatureStore.open(manifest_path)


def _resolve_fold(cfg: RunConfig, store: FeatureStore):
    if cfg.fold == -1:
        return all_test_fold(store.class_ids())
    n_classes = len(store.manifest.classes)
    return make_folds(cfg.dataset_style, n_classes)[cfg.fold]


def run_synth(req: SynthRequest) -> SynthResponse:
    out = Path(req.out)
    manifest_path = out / "manifest.json"
    manifest = generate_synthetic(manifest_path, req.n_classes, req.images_per_class, req.seed)
    _write_meta(out, "synth", req)
    return SynthResponse(
        manifest=str(manifest_path), records=len(manifest.records), classes=len(manifest.classes)
    )


def run_train(cfg: RunConfig) -> TrainResponse:
    store = _open_store(cfg.manifest)
    fold = _resolve_fold(cfg, store)
    if not fold.train_classes:
        raise ConfigError("training needs a fold with train classes (fold -1 has none)")
    dconf = cfg.decoder_config().validate()
    state, trace = train(store, fold, dconf, cfg.iterations, cfg.seed, lr=cfg.lr)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = save_checkpoint(out / "checkpoint", state.params, dconf)
    loss_csv = out / "loss.csv"
    with open(loss_csv, "w") as fh:
        fh.write("step,loss\n")
        for step, loss in trace:
            fh.write(f"{step},{loss:.9e}\n")
    meta = _write_meta(out, "train", cfg)
    return TrainResponse(
        checkpoint=str(ckpt_dir),
        loss_csv=str(loss_csv),
        meta=meta,
        steps=len(trace),
        final_loss=trace[-1][1] if trace else None,
    )


def _load_params(cfg: RunConfig):
    """Checkpoint params+config when given, otherwise a fresh seeded init."""
    if cfg.checkpoint:
        return load_checkpoint(cfg.checkpoint)
    dconf = cfg.decoder_config().validate()
    return init_params(dconf, cfg.seed), dconf


def run_eval(cfg: RunConfig) -> EvalResponse:
    store = _open_store(cfg.manifest)
    fold = _resolve_fold(cfg, store)
    params, dconf = _load_params(cfg)
    acc = evaluate(
        store, fold, dconf, params,
        k=cfg.k, n_episodes=cfg.episodes, seed=cfg.seed,
        workers=cfg.workers, manifest_path=cfg.manifest, split=cfg.split,
    )
    eval_classes = fold.train_classes if cfg.split == "train" else fold.test_classes
    classes = sorted(set(eval_classes) & set(store.by_class))
    score, per_class, undefined = miou(acc, classes)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    results_csv = out / "results.csv"
    with open(results_csv, "w") as fh:
        fh.write("kind,key,value\n")
        for cid in classes:
            if cid in per_class:
                fh.write(f"class_iou,{cid},{per_class[cid]:.10f}\n")
            else:
                fh.write(f"class_iou,{cid},undefined\n")
        fh.write(f"fold_miou,,{score:.10f}\n")
        fh.write(f"meta,seed,{cfg.seed}\n")
        fh.write(f"meta,config_hash,{config_hash(cfg)}\n")
        fh.write(f"meta,episodes,{cfg.episodes}\n")
        fh.write(f"meta,k,{cfg.k}\n")
        fh.write(f"meta,fold,{cfg.fold}\n")
    meta = _write_meta(out, "eval", cfg)
    return EvalResponse(
        miou=score,
        per_class=per_class,
        undefined_classes=sorted(undefined),
        episodes=cfg.episodes,
        results_csv=str(results_csv),
        meta=meta,
    )


def run_predict(cfg: RunConfig) -> PredictResponse:
    store = _open_store(cfg.manifest)
    fold = _resolve_fold(cfg, store)
    params, dconf = _load_params(cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
    spec = sample_episode_spec(store, fold, cfg.split, cfg.k, rng)
    episode = load_episode(store, spec, with_text=dconf.use_text)
    pred = predict_kshot(episode, params, dconf)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    pgm_path = out / "prediction.pgm"
    tensor_path = out / "prediction.fmtc"
    write_pgm(pgm_path, pred)
    write_tensor(tensor_path, pred, dtype="f32")
    inter = float(np.logical_and(pred == 1, episode.query.gt_mask == 1).sum())
    union = float(np.logical_or(pred == 1, episode.query.gt_mask == 1).sum())
    meta = _write_meta(out, "predict", cfg)
    return PredictResponse(
        mask_pgm=str(pgm_path),
        mask_tensor=str(tensor_path),
        meta=meta,
        class_id=episode.class_id,
        episode_id=episode.episode_id,
        iou=inter / union if union else 1.0,
    )


def run_viz(cfg: RunConfig) -> VizResponse:
    """Per-layer averaged activation maps (and the text activation when
    available) for one sampled episode, as PGM + container tensors."""
    store = _open_store(cfg.manifest)
    fold = _resolve_fold(cfg, store)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4]))
    spec = sample_episode_spec(store, fold, cfg.split, 1, rng)
    episode = load_episode(store, spec, with_text=cfg.use_text)
    support = episode.supports[0]
    masked = mask_support_features(support.features, support.mask)
    maps = build_vision_correlations(episode.query.features, masked, cfg.m)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for offset, corr in enumerate(maps):
        layer = cfg.m + offset
        act = averaged_activation_map(corr)
        pgm = out / f"layer-{layer:02d}.pgm"
        ten = out / f"layer-{layer:02d}.fmtc"
        write_pgm(pgm, act)
        write_tensor(ten, act, dtype="f32")
        files += [str(pgm), str(ten)]
    if cfg.use_text and episode.text is not None and episode.query.vl_features is not None:
        act = build_text_activation(episode.query.vl_features, episode.text)
        pgm = out / "text.pgm"
        ten = out / "text.fmtc"
        write_pgm(pgm, act)
        write_tensor(ten, act, dtype="f32")
        files += [str(pgm), str(ten)]
    meta = _write_meta(out, "viz", cfg)
    return VizResponse(files=files, meta=meta, class_id=episode.class_id, episode_id=episode.episode_id)


def run_params(req: ParamsRequest) -> ParamsResponse:
    dconf = req.decoder_config().validate()
    params = init_params(dconf, seed=0)
    by_component = {}
    for name, arr in params.arrays().items():
        component = name.split(".", 1)[0]
        by_component[component] = by_component.get(component, 0) + int(arr.size)
    return ParamsResponse(count=count_params(params), by_component=by_component)
