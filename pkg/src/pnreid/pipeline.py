"""Run-directory stages: synth-data -> cluster-poses -> train-gan -> gen-normalized
-> train-reid -> eval."""
from __future__ import annotations

import csv
import fcntl
import hashlib
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .canonical_poses import (
    CanonicalPoseSet, load_canonical_poses, save_canonical_poses, select_canonical_poses,
)
from .checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from .config import PipelineConfig, config_hash
from .gan_training import PairDataset, generate, reconstruction_l1, train_pn_gan
from .networks import ArchConfig, Generator, init_params
from .reid_features import (
    Backbone, BackboneConfig, init_backbone, train_backbone_b, train_identity_classifier,
)
from .retrieval_eval import EvalReport, FusionConfig, evaluate_pipeline
from .synth_data import StickDataset, generate_dataset, load_dataset, save_dataset, save_png

log = logging.getLogger(__name__)

STAGES = ("synth-data", "cluster-poses", "train-gan", "gen-normalized", "train-reid", "eval")


class PipelineError(ValueError):
    """Missing inputs or inconsistent run state (a validation failure)."""


class RunDir:
    """Layout and bookkeeping of one run directory."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    @property
    def dataset(self) -> Path:
        return self.path("dataset")

    @property
    def canonical(self) -> Path:
        return self.path("canonical_poses")

    def ckpt(self, name: str) -> Path:
        return self.path("checkpoints", f"{name}.pt")

    @contextmanager
    def locked(self):
        self.root.mkdir(parents=True, exist_ok=True)
        fh = open(self.path(".lock"), "w")
        try:
            try:
                fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
            except BlockingIOError:
                raise PipelineError(f"run directory {self.root} is in use by another process") from None
            yield self
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)
            fh.close()

    # manifest ----------------------------------------------------------------

    def manifest(self) -> dict:
        p = self.path("manifest.json")
        if p.is_file():
            return json.loads(p.read_text())
        return {"format_version": 1, "entries": []}

    def append_entry(self, entry: dict) -> None:
        m = self.manifest()
        m["entries"].append(entry)
        self.path("manifest.json").write_text(json.dumps(m, indent=2) + "\n")

    def completed(self, stage: str, stage_hash: str) -> dict | None:
        for e in reversed(self.manifest()["entries"]):
            if e["stage"] == stage and e["status"] == "completed":
                if e["config_hash"] == stage_hash and all(self.path(o).exists() for o in e["outputs"]):
                    return e
                return None
        return None

    def lock_config(self, cfg: PipelineConfig, force: bool = False) -> None:
        p = self.path("config.lock.json")
        body = {"config_hash": cfg.full_hash(), "config": cfg.model_dump(mode="json")}
        if p.is_file() and not force:
            old = json.loads(p.read_text())
            if old.get("config_hash") != body["config_hash"]:
                raise PipelineError(f"{self.root} was created with config {old.get('config_hash')}; "
                                    f"got {body['config_hash']} (use --force to replace it)")
            return
        self.root.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


# -- model loading ------------------------------------------------------------------

def _params_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().contiguous().numpy().tobytes())
    return h.hexdigest()


def load_generator(path) -> Generator:
    payload = read_checkpoint(path)
    try:
        arch_d = payload["meta"]["arch"]
        arch = ArchConfig(arch_d["base_channels"], arch_d["n_res_blocks"], tuple(arch_d["input_dims"]),
                          arch_d["discriminator_layers"], arch_d["padding_mode"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: missing generator architecture metadata") from exc
    gen, _ = init_params(arch, 0)
    load_checkpoint(path, gen, stage="train-gan")
    return gen.eval()


def load_backbone(path) -> Backbone:
    payload = read_checkpoint(path)
    try:
        meta = payload["meta"]
        a = meta["arch"]
        arch = BackboneConfig(a["base_channels"], a["feature_dim"], tuple(a["input_dims"]),
                              tuple(a["tap_stages"]))
        net = init_backbone(arch, int(meta["num_identities"]), 0, float(meta.get("dropout", 0.5)))
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: missing backbone metadata") from exc
    load_checkpoint(path, net, stage="train-reid")
    return net.eval()


def _arch_meta(arch) -> dict:
    d = asdict(arch)
    d["input_dims"] = list(arch.input_dims)
    if "tap_stages" in d:
        d["tap_stages"] = list(d["tap_stages"])
    return d


# -- stages ------------------------------------------------------------------------

class Pipeline:
    def __init__(self, cfg: PipelineConfig, run: RunDir, force: bool = False):
        self.cfg = cfg
        self.run = run
        self.force = force
        self._dataset: StickDataset | None = None

    def dataset_root(self) -> Path:
        return Path(self.cfg.data.path) if self.cfg.data.path else self.run.dataset

    def dataset(self) -> StickDataset:
        if self._dataset is None:
            root = self.dataset_root()
            if not (root / "split.json").is_file():
                raise PipelineError(f"dataset not found at {root} (run synth-data first)")
            self._dataset = load_dataset(root)
        return self._dataset

    def _stage(self, stage: str, fn, extra_key: str = "", **kw) -> dict:
        h = self.cfg.stage_hash(stage)
        if extra_key:
            h = config_hash([h, extra_key])
        done = self.run.completed(stage, h)
        if done is not None and not self.force:
            log.info("%s: up to date (config %s), skipping", stage, h)
            return done
        t0 = time.perf_counter()
        outputs, metrics = fn(**kw)
        entry = {"stage": stage, "status": "completed", "config_hash": h, "seed": self.cfg.seed,
                 "outputs": [str(Path(o).relative_to(self.run.root)) if Path(o).is_absolute()
                             and self.run.root.resolve() in Path(o).resolve().parents else str(o)
                             for o in outputs],
                 "metrics": metrics, "seconds": round(time.perf_counter() - t0, 3)}
        self.run.append_entry(entry)
        return entry

    # synth-data
    def synth_data(self) -> dict:
        return self._stage("synth-data", self._synth_data)

    def _synth_data(self):
        if self.cfg.data.path:
            ds = self.dataset()
            return [], {"n_samples": len(ds.samples), "source": "external"}
        ds = generate_dataset(self.cfg.synth_config())
        save_dataset(ds, self.run.dataset)
        self._dataset = None
        return ["dataset"], {"n_samples": len(ds.samples), **{k: len(v) for k, v in ds.split.items()}}

    # cluster-poses
    def cluster_poses(self) -> dict:
        return self._stage("cluster-poses", self._cluster_poses)

    def _cluster_poses(self):
        train = self.dataset().subset("train")
        if not train:
            raise PipelineError("dataset has an empty training split")
        canon = select_canonical_poses([(s.keypoints, s.sample_id) for s in train], self.cfg.poses.K,
                                       self.cfg.seed, tuple(self.cfg.dims), max_iter=self.cfg.poses.max_iter)
        save_canonical_poses(canon, self.run.canonical, [s.sample_id for s in train])
        m = canon.cluster_model
        return ["canonical_poses"], {"inertia": m.inertia, "cluster_sizes": [int(s) for s in m.sizes],
                                     "medoid_sample_ids": canon.source_sample_ids}

    def canonical(self) -> CanonicalPoseSet:
        if not (self.run.canonical / "manifest.json").is_file():
            raise PipelineError(f"canonical poses not found at {self.run.canonical} (run cluster-poses)")
        return load_canonical_poses(self.run.canonical, tuple(self.cfg.dims))

    # train-gan
    def train_gan(self) -> dict:
        return self._stage("train-gan", self._train_gan)

    def _train_gan(self):
        train = self.dataset().subset("train")
        pairs = PairDataset.from_samples(train)
        arch = self.cfg.gan_arch()
        h = self.cfg.stage_hash("train-gan")
        meta = {"arch": _arch_meta(arch)}

        def on_ckpt(step, gen, disc):
            save_checkpoint(self.run.path("checkpoints", "gan", f"generator_{step:06d}.pt"), gen,
                            "train-gan", step, h, meta)

        res = train_pn_gan(pairs, arch, self.cfg.gan_train(), self.cfg.gan_loss(),
                           checkpoint_every=self.cfg.gan.checkpoint_every, on_checkpoint=on_ckpt)
        steps = len(res.history)
        save_checkpoint(self.run.ckpt("generator"), res.generator, "train-gan", steps, h, meta)
        save_checkpoint(self.run.ckpt("discriminator"), res.discriminator, "train-gan", steps, h, meta)
        loss_path = self.run.path("losses", "gan.csv")
        loss_path.parent.mkdir(parents=True, exist_ok=True)
        with open(loss_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "L_D", "gen_adv", "L1", "L_G"])
            for m in res.history:
                w.writerow([m.step + 1, f"{m.l_d:.6f}", f"{m.gen_adv:.6f}", f"{m.l1:.6f}", f"{m.l_g:.6f}"])
        held_in = reconstruction_l1(res.generator, pairs, self.cfg.gan.include_self_pairs)
        return (["checkpoints/generator.pt", "checkpoints/discriminator.pt", "losses/gan.csv"],
                {"steps": steps, "held_in_l1": held_in})

    # gen-normalized
    def gen_normalized(self) -> dict:
        return self._stage("gen-normalized", self._gen_normalized)

    def _gen_normalized(self):
        from .gan_training import synthesize_batch

        train = self.dataset().subset("train")
        gen = load_generator(self.run.ckpt("generator"))
        canon = self.canonical()
        images = np.stack([s.image for s in train])
        synth = synthesize_batch(images, canon, gen)
        out = self.run.path("synth", "train_normalized.npz")
        out.parent.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(out, images=synth, labels=np.array([s.identity for s in train]),
                            sample_ids=np.array([s.sample_id for s in train]))
        grids = self.run.path("images", "grids")
        grids.mkdir(parents=True, exist_ok=True)
        # source | target pose | generated, one triptych row per canonical pose
        for i in range(min(4, len(train))):
            rows = [np.concatenate([images[i], canon.poses[c], synth[i, c]], axis=1) for c in range(len(canon))]
            save_png(grids / f"{train[i].sample_id}.png", np.concatenate(rows, axis=0))
        return ["synth/train_normalized.npz", "images/grids"], {"n_images": int(synth.shape[0] * synth.shape[1])}

    # train-reid
    def train_reid(self) -> dict:
        return self._stage("train-reid", self._train_reid)

    def _train_reid(self):
        train = self.dataset().subset("train")
        images = np.stack([s.image for s in train])
        labels = np.array([s.identity for s in train])
        arch = self.cfg.backbone()
        h = self.cfg.stage_hash("train-reid")
        res_a = train_identity_classifier(images, labels, arch, self.cfg.reid_train("a"))
        npz = self.run.path("synth", "train_normalized.npz")
        if not npz.is_file():
            raise PipelineError(f"normalized images not found at {npz} (run gen-normalized)")
        with np.load(npz) as z:
            synth, synth_labels = z["images"], z["labels"]
        x_b = synth.reshape((-1,) + images.shape[1:])
        y_b = np.repeat(synth_labels, synth.shape[1])
        cfg_b = self.cfg.reid_train("b")
        if cfg_b.include_originals:
            x_b, y_b = np.concatenate([x_b, images]), np.concatenate([y_b, labels])
        res_b = train_identity_classifier(x_b, y_b, arch, cfg_b)
        n_ids = len(np.unique(labels))
        for name, res, cfg in (("backbone_a", res_a, self.cfg.reid_train("a")), ("backbone_b", res_b, cfg_b)):
            save_checkpoint(self.run.ckpt(name), res.net, "train-reid", cfg.epochs, h,
                            {"arch": _arch_meta(arch), "num_identities": n_ids, "dropout": cfg.dropout})
            path = self.run.path("losses", f"reid_{name[-1]}.csv")
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["epoch", "loss", "accuracy"])
                for e, (l, a) in enumerate(zip(res.loss, res.accuracy), 1):
                    w.writerow([e, f"{l:.6f}", f"{a:.6f}"])
        return (["checkpoints/backbone_a.pt", "checkpoints/backbone_b.pt", "losses/reid_a.csv",
                 "losses/reid_b.csv"],
                {"final_accuracy_a": res_a.accuracy[-1] if res_a.accuracy else None,
                 "final_accuracy_b": res_b.accuracy[-1] if res_b.accuracy else None})

    # eval
    def eval(self, models_from: str | Path | None = None) -> dict:
        key = str(Path(models_from).resolve()) if models_from is not None else ""
        return self._stage("eval", self._eval, extra_key=key, models_from=models_from)

    def _eval(self, models_from=None):
        src = RunDir(models_from) if models_from is not None else self.run
        for name in ("generator", "backbone_a", "backbone_b"):
            if not src.ckpt(name).is_file():
                raise PipelineError(f"checkpoint not found: {src.ckpt(name)}")
        if not (src.canonical / "manifest.json").is_file():
            raise PipelineError(f"canonical poses not found: {src.canonical / 'manifest.json'}")
        gen = load_generator(src.ckpt("generator"))
        net_a = load_backbone(src.ckpt("backbone_a"))
        net_b = load_backbone(src.ckpt("backbone_b"))
        canon = load_canonical_poses(src.canonical, tuple(gen.arch.input_dims))
        models = (gen, net_a, net_b)
        for m in models:
            m.requires_grad_(False)
        before = [_params_digest(m) for m in models]

        ds = self.dataset()
        q, g = ds.subset("query"), ds.subset("gallery")
        if not q or not g:
            raise PipelineError("dataset has no query/gallery split to evaluate")

        def triple(samples):
            return (np.stack([s.image for s in samples]), np.array([s.identity for s in samples]),
                    np.array([s.camera for s in samples]))

        query, gallery = triple(q), triple(g)
        protocol = self.cfg.protocol()
        fusion = self.cfg.fusion()
        report = evaluate_pipeline(query, gallery, net_a, net_b, gen, canon, protocol, fusion)
        ablations = {}
        for label, fc in (("backbone_a", FusionConfig(True, 0)),
                          ("fused_1_pose", FusionConfig(True, min(1, len(canon)))),
                          ("fused_all_poses", FusionConfig(True, len(canon))),
                          ("backbone_b", FusionConfig(False, len(canon)))):
            r = evaluate_pipeline(query, gallery, net_a, net_b, gen, canon, protocol, fc)
            ablations[label] = {"rank1": r.rank(1), "map": r.map}
        after = [_params_digest(m) for m in models]
        if before != after:
            raise RuntimeError("model parameters changed during evaluation")

        out = write_eval(self.run, report, self.cfg.eval.ranks, fusion,
                         mode="transfer" if models_from is not None else "standard")
        ab_path = self.run.path("metrics", "ablation.json")
        ab_path.write_text(json.dumps(ablations, indent=2, sort_keys=True) + "\n")
        n_gallery_ids = len(np.unique(gallery[1]))
        return ([str(out.relative_to(self.run.root)), "metrics/cmc.csv", "metrics/ablation.json"],
                {"rank1": report.rank(1), "map": report.map, "mode": "transfer" if models_from else "standard",
                 "models_from": str(models_from) if models_from else None,
                 "n_gallery_identities": int(n_gallery_ids), "parameters_unchanged": True})

    def run_all(self) -> dict:
        self.synth_data()
        self.cluster_poses()
        self.train_gan()
        self.gen_normalized()
        self.train_reid()
        return self.eval()


def write_eval(run: RunDir, report: EvalReport, ranks, fusion: FusionConfig, mode: str = "standard") -> Path:
    metrics = run.path("metrics")
    metrics.mkdir(parents=True, exist_ok=True)
    body = report.to_dict(ranks)
    body["mode"] = mode
    body["fusion"] = {"use_backbone_a": fusion.use_backbone_a, "n_poses": fusion.n_poses}
    out = metrics / "eval.json"
    out.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    with open(metrics / "cmc.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "accuracy"])
        for k, acc in enumerate(report.cmc, 1):
            w.writerow([k, f"{acc:.6f}"])
    return out
