"""Tracking-then-referring orchestration at desk scale.

Tracker output is held frozen; every (trajectory, prompt) pair is scored by
the fusion block over a sliding window of frames, calibrated, and filtered
by a strict threshold. Also hosts the synthetic dataset generator that
stands in for the real benchmark data, and the toy training loop.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import calibration, features, fusion, tensor, tensor_io
from .features import EmbedderConfig, ModalityFeatures, ProjectionMLP
from .fusion import FusionParams
from .tensor import (
    DegenerateInputError,
    Tensor,
    add,
    fresh_context,
    no_grad,
    relu,
    reshape,
    scale,
    sgd_momentum_step,
    sub,
)


class LookupError_(KeyError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class Trajectory:
    track_id: int
    frames: list  # ordered (frame_index, [x, y, w, h])
    entity_id: str

    def __post_init__(self):
        idx = [f for f, _ in self.frames]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"track {self.track_id}: frame indices not strictly increasing")
        for _, box in self.frames:
            if box[2] <= 0 or box[3] <= 0:
                raise ValueError(f"track {self.track_id}: non-positive box extent {box}")


@dataclass
class ReferringTask:
    prompt_id: str
    text: str
    entity_id: str
    candidates: list


@dataclass
class ScoredCandidate:
    track_id: int
    prompt_id: str
    raw_score: float
    pseudo_freq: float
    refined_score: float
    kept: bool


@dataclass
class TrainSample:
    track_id: int
    prompt_id: str
    frame_indices: list
    match: bool


# ---- the referring model ---------------------------------------------------


class ReferringModel:
    """Frozen synthetic embedders + trainable projection MLPs + fusion block."""

    def __init__(self, embedder: EmbedderConfig, fusion_params: FusionParams,
                 mlp_global: ProjectionMLP, mlp_local: ProjectionMLP,
                 mlp_prompt: ProjectionMLP, concept_of=None):
        self.embedder = embedder
        self.fusion_params = fusion_params
        self.mlp_global = mlp_global
        self.mlp_local = mlp_local
        self.mlp_prompt = mlp_prompt
        self.concept_of = dict(concept_of or {})
        self._raw_cache = {}

    @classmethod
    def build(cls, embedder: EmbedderConfig, variant="mex", residual_add=False,
              per_pair=False, mlp_hidden=None, seed=0, concept_of=None):
        rng = np.random.default_rng(seed)
        d_k = embedder.fused_dim
        fp = FusionParams(variant, d_k, rng, residual_add=residual_add, per_pair=per_pair)
        mk = lambda d_raw: ProjectionMLP.init(d_raw, d_k, rng, hidden=mlp_hidden)
        return cls(embedder, fp, mk(embedder.raw_visual_dim), mk(embedder.raw_visual_dim),
                   mk(embedder.raw_text_dim), concept_of=concept_of)

    def parameters(self):
        return (self.fusion_params.parameters() + self.mlp_global.parameters()
                + self.mlp_local.parameters() + self.mlp_prompt.parameters())

    def param_count(self):
        return (self.fusion_params.param_count() + self.mlp_global.param_count()
                + self.mlp_local.param_count() + self.mlp_prompt.param_count())

    def _raw_tokens(self, entity_id, modality):
        key = (entity_id, modality)
        if key not in self._raw_cache:
            f = features.embed_synthetic(entity_id, modality, self.embedder,
                                         concept=self.concept_of.get(entity_id))
            if self.embedder.truncate_to is not None:
                f = features.truncate(f, self.embedder.truncate_to)
            self._raw_cache[key] = f.tokens[0]  # [s, d_raw]
        return self._raw_cache[key]

    def _project(self, raw, mlp):
        t = mlp(Tensor(raw))
        return t

    def forward_window(self, frame_entities, local_entities, prompt_entity):
        """Score one window: per-frame fusion, ST pooling, cosine vs pooled prompt."""
        fP = self._project(self._raw_tokens(prompt_entity, features.PROMPT), self.mlp_prompt)
        per_frame = []
        for fe, le in zip(frame_entities, local_entities):
            fG = self._project(self._raw_tokens(fe, features.GLOBAL_FRAME), self.mlp_global)
            fL = self._project(self._raw_tokens(le, features.LOCAL_TRACK), self.mlp_local)
            per_frame.append(fusion.fuse(self.fusion_params, fG, fL, fP).fused)
        pooled = fusion.st_pool(tensor.stack(per_frame))
        prompt_pooled = tensor.mean_axis(fP, axis=0)
        return fusion.score(pooled, prompt_pooled)

    # ---- persistence -------------------------------------------------------

    def save(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        names = []
        for name, t in self._named_parameters():
            fn = name + ".mext"
            tensor_io.write_tensor(os.path.join(out_dir, fn), t.data)
            names.append(name)
        manifest = {
            "embedder": _embedder_to_dict(self.embedder),
            "fusion": {
                "variant": self.fusion_params.variant,
                "d_k": self.fusion_params.d_k,
                "residual_add": self.fusion_params.residual_add,
                "per_pair": self.fusion_params.per_pair,
            },
            "mlp_hidden": self.mlp_global.first.d_out,
            "params": names,
            "concept_of": self.concept_of,
        }
        with open(os.path.join(out_dir, "params.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, in_dir):
        with open(os.path.join(in_dir, "params.json")) as fh:
            manifest = json.load(fh)
        emb = EmbedderConfig(**{**manifest["embedder"],
                                "concepts": tuple(manifest["embedder"]["concepts"])})
        f = manifest["fusion"]
        model = cls.build(emb, variant=f["variant"], residual_add=f["residual_add"],
                          per_pair=f["per_pair"], mlp_hidden=manifest["mlp_hidden"],
                          concept_of=manifest["concept_of"])
        for name, t in model._named_parameters():
            t.data = tensor_io.read_tensor(os.path.join(in_dir, name + ".mext")).astype(
                t.data.dtype)
        return model

    def _named_parameters(self):
        out = []
        for ln in sorted(self.fusion_params.linears):
            lin = self.fusion_params.linears[ln]
            out.append((f"fusion.{ln}.w", lin.w))
            out.append((f"fusion.{ln}.bias", lin.bias))
        for mname, mlp in (("mlp_global", self.mlp_global), ("mlp_local", self.mlp_local),
                           ("mlp_prompt", self.mlp_prompt)):
            for part in ("first", "second"):
                lin = getattr(mlp, part)
                out.append((f"{mname}.{part}.w", lin.w))
                out.append((f"{mname}.{part}.bias", lin.bias))
        return out


def _embedder_to_dict(e: EmbedderConfig):
    return {
        "seed": e.seed, "raw_visual_dim": e.raw_visual_dim, "visual_tokens": e.visual_tokens,
        "raw_text_dim": e.raw_text_dim, "text_tokens": e.text_tokens,
        "fused_dim": e.fused_dim, "truncate_to": e.truncate_to,
        "oracle_mode": e.oracle_mode, "noise_scale": e.noise_scale,
        "concepts": list(e.concepts),
    }


# ---- scoring and filtering -------------------------------------------------


def frame_entity(frame_index):
    return f"frame-{frame_index}"


def local_entity(track_entity, frame_index):
    return f"{track_entity}@{frame_index}"


def _window_frames(traj: Trajectory, window):
    if window < 1:
        raise DegenerateInputError(f"window must be >= 1, got {window}")
    if not traj.frames:
        raise DegenerateInputError(f"track {traj.track_id} has no frames")
    return [f for f, _ in traj.frames[-window:]]


def score_pair(model: ReferringModel, traj: Trajectory, task: ReferringTask,
               window, stats: calibration.ExpressionStats, threshold, prompt_index=0):
    idx = _window_frames(traj, window)
    with no_grad():
        s = model.forward_window(
            [frame_entity(i) for i in idx],
            [local_entity(traj.entity_id, i) for i in idx],
            task.entity_id,
        ).item()
    s_prime, p = stats.refine(s, task.prompt_id, fallback_index=prompt_index)
    return ScoredCandidate(track_id=traj.track_id, prompt_id=task.prompt_id,
                           raw_score=s, pseudo_freq=p, refined_score=s_prime,
                           kept=s_prime > threshold)


def score_all(trajectories, tasks, model: ReferringModel, window, stats=None,
              threshold=0.0, workers=1):
    """Score every (candidate trajectory, prompt) pair. Deterministic given seeds."""
    stats = stats or calibration.disabled_stats()
    by_id = {t.track_id: t for t in trajectories}
    jobs = []
    for j, task in enumerate(sorted(tasks, key=lambda t: t.prompt_id)):
        if not task.candidates:
            raise DegenerateInputError(f"task {task.prompt_id} has no candidates")
        for tid in task.candidates:
            if tid not in by_id:
                raise LookupError_(f"unknown track_id {tid} in task {task.prompt_id}")
            jobs.append((by_id[tid], task, j))
    run = lambda job: score_pair(model, job[0], job[1], window, stats, threshold,
                                 prompt_index=job[2])
    if workers > 1:
        with fresh_context():
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    results.sort(key=lambda c: (c.prompt_id, -c.refined_score, c.track_id))
    return results


def filter_candidates(candidates, threshold):
    """Keep candidates with refined score strictly above the threshold."""
    kept = [c for c in candidates if c.refined_score > threshold]
    kept.sort(key=lambda c: (c.prompt_id, -c.refined_score, c.track_id))
    return kept


# ---- training --------------------------------------------------------------


def sample_loss(model: ReferringModel, traj: Trajectory, sample: TrainSample,
                prompt_entity, neg_margin=0.0):
    idx = sample.frame_indices
    s = model.forward_window(
        [frame_entity(i) for i in idx],
        [local_entity(traj.entity_id, i) for i in idx],
        prompt_entity,
    )
    if sample.match:
        return sub(Tensor(np.asarray(1.0)), s)
    return relu(sub(s, Tensor(np.asarray(neg_margin))))


def train(samples, trajectories, tasks, model: ReferringModel, epochs=100,
          batch_size=8, lr=1e-5, momentum=1e-5, neg_margin=0.0, seed=0,
          log=None):
    """SGD with momentum on the cosine objective; embedders stay frozen.

    Returns the per-epoch mean loss curve.
    """
    if not samples:
        raise DegenerateInputError("empty training dataset")
    by_track = {t.track_id: t for t in trajectories}
    by_prompt = {t.prompt_id: t for t in tasks}
    params = model.parameters()
    velocities = [np.zeros_like(p.data) for p in params]
    order_rng = np.random.default_rng(seed)
    curve = []
    for epoch in range(epochs):
        order = order_rng.permutation(len(samples))
        total = 0.0
        for start in range(0, len(order), batch_size):
            batch = [samples[i] for i in order[start:start + batch_size]]
            with fresh_context():
                losses = []
                for smp in batch:
                    traj = by_track[smp.track_id]
                    task = by_prompt[smp.prompt_id]
                    losses.append(sample_loss(model, traj, smp, task.entity_id,
                                              neg_margin=neg_margin))
                batch_loss = losses[0]
                for extra in losses[1:]:
                    batch_loss = add(batch_loss, extra)
                batch_loss = scale(batch_loss, 1.0 / len(losses))
                val = batch_loss.item()
                if not np.isfinite(val):
                    raise TrainingError(
                        f"non-finite loss {val} at epoch {epoch}, batch start {start}")
                total += val * len(losses)
                batch_loss.backward()
            sgd_momentum_step(params, velocities, lr, momentum)
        curve.append(total / len(samples))
        if log is not None:
            log(epoch, curve[-1])
    return curve


# ---- synthetic dataset -----------------------------------------------------


@dataclass
class DatasetConfig:
    seed: int = 0
    n_concepts: int = 4
    n_tracks: int = 10
    n_prompts: int = 4
    n_frames: int = 12
    n_windows: int = 32
    window: int = 4


def generate_synthetic_dataset(cfg: DatasetConfig):
    """Deterministic toy referring dataset; prompts link to >= 1 matching track."""
    for name in ("n_concepts", "n_tracks", "n_prompts", "n_frames", "n_windows", "window"):
        if getattr(cfg, name) <= 0:
            raise DegenerateInputError(f"{name} must be positive")
    rng = np.random.default_rng(cfg.seed)
    concepts = [f"concept-{i}" for i in range(cfg.n_concepts)]
    trajectories, manifest = [], []
    for i in range(cfg.n_tracks):
        concept = concepts[i % cfg.n_concepts]
        ent = f"track-{i}"
        boxes = []
        x, y = rng.uniform(0, 600, size=2)
        for f in range(cfg.n_frames):
            x += rng.uniform(-5, 5)
            y += rng.uniform(-5, 5)
            w, h = rng.uniform(20, 80, size=2)
            boxes.append((f, [round(float(v), 3) for v in (x, y, w, h)]))
        trajectories.append(Trajectory(track_id=i, frames=boxes, entity_id=ent))
        manifest.append({"entity_id": ent, "modality": features.LOCAL_TRACK,
                         "concept": concept})
        for f in range(cfg.n_frames):
            manifest.append({"entity_id": local_entity(ent, f),
                             "modality": features.LOCAL_TRACK, "concept": concept})
    tasks = []
    for j in range(cfg.n_prompts):
        concept = concepts[j % cfg.n_concepts]
        ent = f"prompt-{j}"
        tasks.append(ReferringTask(prompt_id=f"p{j:03d}", text=f"objects of {concept}",
                                   entity_id=ent, candidates=list(range(cfg.n_tracks))))
        manifest.append({"entity_id": ent, "modality": features.PROMPT, "concept": concept})

    concept_by_track = {t.track_id: concepts[t.track_id % cfg.n_concepts]
                        for t in trajectories}
    concept_by_prompt = {t.prompt_id: concepts[int(t.prompt_id[1:]) % cfg.n_concepts]
                         for t in tasks}
    labels = [{"prompt_id": t.prompt_id, "track_id": tr.track_id,
               "match": concept_by_prompt[t.prompt_id] == concept_by_track[tr.track_id]}
              for t in tasks for tr in trajectories]

    # cycle through every (prompt, track-concept) pairing so the training set
    # covers all concept combinations before repeating any
    samples = []
    for w in range(cfg.n_windows):
        prompt = tasks[w % cfg.n_prompts]
        concept = concepts[(w // cfg.n_prompts) % cfg.n_concepts]
        pool = [tr for tr in trajectories if concept_by_track[tr.track_id] == concept]
        traj = pool[int(rng.integers(len(pool)))]
        start = int(rng.integers(0, cfg.n_frames - cfg.window + 1))
        samples.append(TrainSample(
            track_id=traj.track_id, prompt_id=prompt.prompt_id,
            frame_indices=list(range(start, start + cfg.window)),
            match=concept == concept_by_prompt[prompt.prompt_id]))
    return {
        "trajectories": trajectories,
        "tasks": tasks,
        "labels": labels,
        "samples": samples,
        "concepts": concepts,
        "manifest": manifest,
    }


# ---- JSON-lines I/O --------------------------------------------------------


def _write_jsonl(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _read_jsonl(path):
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out


def save_dataset(out_dir, data, cfg: DatasetConfig):
    os.makedirs(out_dir, exist_ok=True)
    _write_jsonl(os.path.join(out_dir, "trajectories.jsonl"),
                 [{"track_id": t.track_id, "frame": f, "box": box, "entity_id": t.entity_id}
                  for t in data["trajectories"] for f, box in t.frames])
    _write_jsonl(os.path.join(out_dir, "tasks.jsonl"),
                 [{"prompt_id": t.prompt_id, "text": t.text, "entity_id": t.entity_id,
                   "candidates": t.candidates} for t in data["tasks"]])
    _write_jsonl(os.path.join(out_dir, "labels.jsonl"), data["labels"])
    _write_jsonl(os.path.join(out_dir, "windows.jsonl"),
                 [{"track_id": s.track_id, "prompt_id": s.prompt_id,
                   "frames": s.frame_indices, "match": s.match} for s in data["samples"]])
    _write_jsonl(os.path.join(out_dir, "concepts.jsonl"), data["manifest"])
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump({"seed": cfg.seed, "n_concepts": cfg.n_concepts, "n_tracks": cfg.n_tracks,
                   "n_prompts": cfg.n_prompts, "n_frames": cfg.n_frames,
                   "n_windows": cfg.n_windows, "window": cfg.window,
                   "concepts": data["concepts"]}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(in_dir):
    rows = _read_jsonl(os.path.join(in_dir, "trajectories.jsonl"))
    by_track = {}
    for r in rows:
        by_track.setdefault((r["track_id"], r["entity_id"]), []).append(
            (r["frame"], r["box"]))
    trajectories = [Trajectory(track_id=tid, frames=sorted(frames), entity_id=ent)
                    for (tid, ent), frames in sorted(by_track.items())]
    tasks = [ReferringTask(prompt_id=r["prompt_id"], text=r["text"],
                           entity_id=r["entity_id"], candidates=r["candidates"])
             for r in _read_jsonl(os.path.join(in_dir, "tasks.jsonl"))]
    labels = _read_jsonl(os.path.join(in_dir, "labels.jsonl"))
    samples = [TrainSample(track_id=r["track_id"], prompt_id=r["prompt_id"],
                           frame_indices=r["frames"], match=r["match"])
               for r in _read_jsonl(os.path.join(in_dir, "windows.jsonl"))]
    manifest = _read_jsonl(os.path.join(in_dir, "concepts.jsonl"))
    with open(os.path.join(in_dir, "meta.json")) as fh:
        meta = json.load(fh)
    return {"trajectories": trajectories, "tasks": tasks, "labels": labels,
            "samples": samples, "manifest": manifest, "meta": meta}


def concept_map(manifest):
    return {e["entity_id"]: e["concept"] for e in manifest}


def write_scores(path, candidates):
    _write_jsonl(path, [{"prompt_id": c.prompt_id, "track_id": c.track_id,
                         "s": c.raw_score, "p": c.pseudo_freq,
                         "s_prime": c.refined_score, "kept": c.kept}
                        for c in candidates])


def read_scores(path):
    return [ScoredCandidate(track_id=r["track_id"], prompt_id=r["prompt_id"],
                            raw_score=r["s"], pseudo_freq=r["p"],
                            refined_score=r["s_prime"], kept=r["kept"])
            for r in _read_jsonl(path)]


def precision_recall(candidates, labels):
    """Kept-vs-label precision and recall over (prompt, track) pairs."""
    truth = {(l["prompt_id"], l["track_id"]): l["match"] for l in labels}
    tp = fp = fn = 0
    for c in candidates:
        match = truth.get((c.prompt_id, c.track_id), False)
        if c.kept and match:
            tp += 1
        elif c.kept and not match:
            fp += 1
        elif not c.kept and match:
            fn += 1
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall
