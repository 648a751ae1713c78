"""Episodic protocol: fold construction, episode sampling, the training loop,
and K-shot voting inference.

Training is single-writer and strictly sequential; evaluation precomputes its
episode descriptors from one RNG stream and can fan the actual forward passes
out to worker processes, merging per-worker accumulators at the end, so the
result is identical at any worker count.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import trim_heap

from .decoder import DecoderConfig, DecoderParams, forward, init_params
from .errors import ConfigError, DataError, NumericError, SamplingError
from .knowledge import (
    FeatureStack,
    QuerySample,
    SupportSample,
    TextEmbedding,
    build_text_activation,
    build_vision_correlations,
    mask_support_features,
)
from .metrics import ConfusionAccumulator
from .store import FeatureStore
from .tensor import AdamState, adam_step, backward, softmax_cross_entropy
from .tensor.core import no_grad

PASCAL_CLASSES = 20
COCO_CLASSES = 80


@dataclasses.dataclass(frozen=True)
class FoldSpec:
    dataset_id: str
    fold_index: int
    train_classes: frozenset
    test_classes: frozenset

    def __post_init__(self):
        if self.train_classes & self.test_classes:
            raise ConfigError("fold train and test classes must be disjoint")


def make_folds(dataset_style: str, class_count: int):
    """Four cross-validation folds.

    pascal: fold i tests the contiguous block [5i, 5i+5) of 20 classes.
    coco: fold i tests the 20 classes congruent to i mod 4 out of 80.
    synthetic: fold i tests a contiguous quarter of the class range.
    """
    if class_count % 4 != 0:
        raise ConfigError(f"class_count must be divisible by 4, got {class_count}")
    all_classes = set(range(class_count))
    folds = []
    for i in range(4):
        if dataset_style == "pascal":
            if class_count != PASCAL_CLASSES:
                raise ConfigError(f"pascal folds need 20 classes, got {class_count}")
            test = set(range(5 * i, 5 * i + 5))
        elif dataset_style == "coco":
            if class_count != COCO_CLASSES:
                raise ConfigError(f"coco folds need 80 classes, got {class_count}")
            test = set(range(i, class_count, 4))
        elif dataset_style == "synthetic":
            q = class_count // 4
            test = set(range(i * q, (i + 1) * q))
        else:
            raise ConfigError(f"unknown dataset style {dataset_style!r}")
        folds.append(
            FoldSpec(
                dataset_id=dataset_style,
                fold_index=i,
                train_classes=frozenset(all_classes - test),
                test_classes=frozenset(test),
            )
        )
    return folds


def all_test_fold(class_ids):
    """Degenerate fold treating every class as novel (smoke evaluation of
    stores too small for the 4-fold protocol, e.g. exporter toy sets)."""
    return FoldSpec(dataset_id="all", fold_index=0,
                    train_classes=frozenset(), test_classes=frozenset(class_ids))


@dataclasses.dataclass(frozen=True)
class EpisodeSpec:
    class_id: int
    query_index: int
    support_indices: tuple


@dataclasses.dataclass
class Episode:
    query: QuerySample
    supports: list
    class_id: int
    text: TextEmbedding | None = None
    episode_id: str = ""

    def __post_init__(self):
        if len(self.supports) < 1:
            raise DataError("an episode needs at least one support (K >= 1)")
        for s in self.supports:
            if s.class_id != self.class_id:
                raise DataError("all supports must share the episode's class")


def sample_episode_spec(store: FeatureStore, fold: FoldSpec, split: str, k: int, rng) -> EpisodeSpec:
    if split not in ("train", "test"):
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
    wanted = fold.train_classes if split == "train" else fold.test_classes
    classes = sorted(set(store.by_class) & set(wanted))
    if not classes:
        raise SamplingError(f"no {split} classes present in the manifest for fold {fold.fold_index}")
    cid = classes[int(rng.integers(len(classes)))]
    recs = store.by_class[cid]
    if len(recs) < k + 1:
        raise SamplingError(f"class {cid} has {len(recs)} images but K+1={k + 1} are needed")
    pick = rng.choice(len(recs), size=k + 1, replace=False)
    chosen = [recs[int(i)] for i in pick]
    return EpisodeSpec(class_id=cid, query_index=chosen[0], support_indices=tuple(chosen[1:]))


def load_episode(store: FeatureStore, spec: EpisodeSpec, with_text: bool) -> Episode:
    cid = spec.class_id
    qrec = store.record(spec.query_index)
    query = QuerySample(
        features=FeatureStack(store.load_stack(qrec), backbone_id=store.manifest.dataset_id),
        gt_mask=(store.load_mask(qrec) == cid + 1).astype(np.float32),
        vl_features=store.load_vl(qrec) if with_text else None,
    )
    supports = []
    for idx in spec.support_indices:
        rec = store.record(idx)
        supports.append(
            SupportSample(
                features=FeatureStack(store.load_stack(rec), backbone_id=store.manifest.dataset_id),
                mask=(store.load_mask(rec) == cid + 1).astype(np.float32),
                class_id=cid,
            )
        )
    text = None
    if with_text:
        vec = store.load_text(cid)
        if vec is None:
            raise DataError(f"manifest has no text embedding for class {cid}")
        text = TextEmbedding(vector=vec, class_id=cid, class_name=store.manifest.classes[cid])
    return Episode(
        query=query,
        supports=supports,
        class_id=cid,
        text=text,
        episode_id=f"c{cid}:{qrec.image_id}<-" + ",".join(store.record(i).image_id for i in spec.support_indices),
    )


def sample_episode(store: FeatureStore, fold: FoldSpec, split: str, k: int, rng,
                   with_text: bool = False) -> Episode:
    return load_episode(store, sample_episode_spec(store, fold, split, k, rng), with_text)


def episode_forward(episode: Episode, params: DecoderParams, config: DecoderConfig,
                    out_size, support_index: int = 0):
    """One 1-shot decoder pass using the chosen support."""
    sup = episode.supports[support_index]
    masked = mask_support_features(sup.features, sup.mask)
    maps = build_vision_correlations(episode.query.features, masked, config.m)
    text_map = None
    if config.use_text:
        if episode.text is None or episode.query.vl_features is None:
            raise DataError("use_text=True but the episode has no vision-language inputs")
        text_map = build_text_activation(episode.query.vl_features, episode.text)
    return forward(maps, text_map, params, config, out_size)


@dataclasses.dataclass
class TrainState:
    params: DecoderParams
    adam: AdamState
    step: int
    seed: int


def train(store: FeatureStore, fold: FoldSpec, config: DecoderConfig, iterations: int,
          seed: int, lr: float = 0.001):
    """Adam + pixel cross-entropy over 1-shot episodes, batch size 1.

    Logits are produced at the ground-truth mask's native resolution, so the
    loss target needs no resampling. Returns (TrainState, [(step, loss)...]).
    """
    config.validate()
    if iterations < 0:
        raise ConfigError(f"iterations must be >= 0, got {iterations}")
    params = init_params(config, seed)
    adam = AdamState(params.parameters())
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    trace = []
    for step in range(1, iterations + 1):
        episode = sample_episode(store, fold, "train", 1, rng, with_text=config.use_text)
        gt = episode.query.gt_mask
        logits = episode_forward(episode, params, config, out_size=gt.shape)
        loss = softmax_cross_entropy(logits, gt)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise NumericError(f"non-finite loss at step {step} on episode {episode.episode_id}")
        params.zero_grad()
        backward(loss)
        adam_step(params.parameters(), adam, lr=lr)
        trace.append((step, loss_val))
        if step % 50 == 0:
            trim_heap()
    return TrainState(params=params, adam=adam, step=iterations, seed=seed), trace


def vote_maps(maps):
    """Pixelwise majority over binary maps; ties (even K only) go to foreground."""
    if not maps:
        raise DataError("voting needs at least one prediction map (K >= 1)")
    votes = np.zeros(maps[0].shape, dtype=np.int64)
    for m in maps:
        votes += np.asarray(m).astype(np.int64)
    return (votes * 2 >= len(maps)).astype(np.float32)


def predict_kshot(episode: Episode, params: DecoderParams, config: DecoderConfig):
    """Run 1-shot inference per support and combine by pixelwise majority
    voting. Returns a binary (H, W) mask at the query mask's resolution."""
    gt_shape = episode.query.gt_mask.shape
    maps = []
    with no_grad():
        for i in range(len(episode.supports)):
            logits = episode_forward(episode, params, config, out_size=gt_shape, support_index=i)
            maps.append((logits.data[1] > logits.data[0]).astype(np.float32))
    return vote_maps(maps)


def _eval_episode(store, spec, params, config, acc):
    episode = load_episode(store, spec, with_text=config.use_text)
    pred = predict_kshot(episode, params, config)
    acc.accumulate(spec.class_id, pred, episode.query.gt_mask)


_WORKER_STATE = {}


def _eval_worker_init(manifest_path, param_arrays, config):
    _WORKER_STATE["store"] = FeatureStore.open(manifest_path)
    _WORKER_STATE["params"] = DecoderParams.from_arrays(param_arrays)
    _WORKER_STATE["config"] = config


def _eval_worker_chunk(specs):
    acc = ConfusionAccumulator()
    for spec in specs:
        _eval_episode(_WORKER_STATE["store"], spec, _WORKER_STATE["params"],
                      _WORKER_STATE["config"], acc)
    return acc.to_dict()


def evaluate(store: FeatureStore, fold: FoldSpec, config: DecoderConfig, params: DecoderParams,
             k: int, n_episodes: int, seed: int, workers: int = 1,
             manifest_path=None, split: str = "test"):
    """Draw n episodes from the given split and accumulate voting predictions
    into a ConfusionAccumulator; deterministic for any worker count."""
    config.validate()
    if k < 1:
        raise DataError(f"K must be >= 1, got {k}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    specs = [sample_episode_spec(store, fold, split, k, rng) for _ in range(n_episodes)]
    acc = ConfusionAccumulator()
    if workers <= 1:
        for i, spec in enumerate(specs):
            _eval_episode(store, spec, params, config, acc)
            if i % 8 == 7:
                trim_heap()
        return acc
    if manifest_path is None:
        raise ConfigError("parallel evaluation needs the manifest path for workers")
    bounds = np.linspace(0, len(specs), workers + 1).astype(int)
    chunks = [specs[a:b] for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    with ProcessPoolExecutor(
        max_workers=len(chunks),
        initializer=_eval_worker_init,
        initargs=(manifest_path, params.arrays(), config),
    ) as pool:
        for result in pool.map(_eval_worker_chunk, chunks):
            acc = acc.merge(ConfusionAccumulator.from_dict(result))
    return acc
