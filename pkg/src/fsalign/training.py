"""Adversarial training loop for the toy two-domain detector.

Every step takes one source and one target image. The detector and the
reconstruction / difference branches are minimised directly; the adversarial
branches (three level classifiers plus the region-instance classifier) are
wired through gradient reversal, so the classifiers minimise their domain
losses while the feature path maximises them. SGD with momentum and a
single-step learning-rate decay drives all parameters.

Also hosts the evaluation protocol (domain probe on frozen pooled features,
target detection match rate), checkpoint serialisation and the gradient
check harness used by the CLI.
"""

import csv
import dataclasses
import io
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import network as nw
from . import synth
from .grouping import apply_deltas, cluster_box_centers, iou, DegenerateGroupingError
from .scale_space import ScaleSweepConfig

CSV_COLUMNS = ("step", "L_c", "L_r", "L_rec", "L_diff", "L_lg", "L_ri", "total")

REVERSED_BRANCHES = ("l_adv1", "l_adv2", "l_adv3", "l_ri")
ALL_BRANCHES = ("l_c", "l_r", "l_rec", "l_diff") + REVERSED_BRANCHES + ("composite",)


class TrainingDiverged(RuntimeError):
    """A loss branch produced a non-finite value."""


@dataclass
class TrainConfig:
    iterations: int = 2000
    lr_initial: float = 1e-3
    lr_after_decay: float = 1e-4
    decay_step: int | None = None  # defaults to 70% of iterations
    momentum: float = 0.9
    weights: L.ObjectiveWeights = field(default_factory=L.ObjectiveWeights)
    seed: int = 0
    corpus_size: int = 40
    eval_size: int = 40
    probe_size: int = 40
    network: nw.NetworkSpec = field(default_factory=nw.NetworkSpec)
    scene: synth.SceneSpec = field(default_factory=synth.SceneSpec)
    shift: synth.DomainShiftSpec = field(default_factory=synth.DomainShiftSpec)
    proposal_noise: synth.ProposalNoiseSpec = field(
        default_factory=synth.ProposalNoiseSpec
    )
    cluster: ScaleSweepConfig = field(default_factory=ScaleSweepConfig)
    # per-pixel reconstruction normalization: keeps the decoder's gradient
    # scale sane at toy image sizes (the loss itself defaults to the raw sum)
    normalize_reconstruction: bool = True
    # optional sigmoid-shaped ramp of the GRL coefficient from 0 to
    # weights.lam over this many steps (0 = constant, matching the paper's
    # fixed setting)
    lambda_warmup_steps: int = 0

    def resolved_decay_step(self):
        return self.decay_step if self.decay_step is not None else int(
            0.7 * self.iterations
        )

    def validate(self):
        if self.lr_initial <= 0 or self.lr_after_decay <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.iterations < 1 or self.corpus_size < 1:
            raise ValueError("iterations and corpus size must be >= 1")
        self.weights.validate()
        self.network.validate()


def config_to_dict(cfg):
    def plain(obj):
        return {k: list(v) if isinstance(v, tuple) else v
                for k, v in dataclasses.asdict(obj).items()}

    d = {
        "iterations": cfg.iterations,
        "lr_initial": cfg.lr_initial,
        "lr_after_decay": cfg.lr_after_decay,
        "decay_step": cfg.decay_step,
        "momentum": cfg.momentum,
        "seed": cfg.seed,
        "corpus_size": cfg.corpus_size,
        "eval_size": cfg.eval_size,
        "probe_size": cfg.probe_size,
        "weights": {"beta": cfg.weights.beta, "lambda": cfg.weights.lam,
                    "gamma": cfg.weights.gamma},
        "network": plain(cfg.network),
        "scene": plain(cfg.scene),
        "shift": plain(cfg.shift),
        "proposal_noise": plain(cfg.proposal_noise),
        "cluster": plain(cfg.cluster),
        "normalize_reconstruction": cfg.normalize_reconstruction,
        "lambda_warmup_steps": cfg.lambda_warmup_steps,
    }
    return d


def config_from_dict(data):
    def build(cls, key, tuple_fields=()):
        kwargs = dict(data.get(key, {}))
        for f in tuple_fields:
            if f in kwargs and isinstance(kwargs[f], list):
                if f == "palette":
                    kwargs[f] = tuple(tuple(c) for c in kwargs[f])
                else:
                    kwargs[f] = tuple(kwargs[f])
        return cls(**kwargs)

    w = data.get("weights", {})
    weights = L.ObjectiveWeights(
        beta=w.get("beta", 0.1), lam=w.get("lambda", 1.0), gamma=w.get("gamma", 5.0)
    )
    cfg = TrainConfig(
        iterations=data.get("iterations", 2000),
        lr_initial=data.get("lr_initial", 1e-3),
        lr_after_decay=data.get("lr_after_decay", 1e-4),
        decay_step=data.get("decay_step"),
        momentum=data.get("momentum", 0.9),
        weights=weights,
        seed=data.get("seed", 0),
        corpus_size=data.get("corpus_size", 40),
        eval_size=data.get("eval_size", 40),
        probe_size=data.get("probe_size", 40),
        network=build(nw.NetworkSpec, "network", ("channels",)),
        scene=build(synth.SceneSpec, "scene",
                    ("canvas", "object_count_range", "shapes", "palette",
                     "background", "radius_range")),
        shift=build(synth.DomainShiftSpec, "shift", ("color_shift",)),
        proposal_noise=build(synth.ProposalNoiseSpec, "proposal_noise"),
        cluster=build(ScaleSweepConfig, "cluster"),
        normalize_reconstruction=data.get("normalize_reconstruction", True),
        lambda_warmup_steps=data.get("lambda_warmup_steps", 0),
    )
    cfg.validate()
    return cfg


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# corpus with cached grouping
# ---------------------------------------------------------------------------

@dataclass
class CorpusEntry:
    sample: synth.Sample
    pset: object
    groups: list      # member index lists (grouping fallback applied)
    outliers: list


def _grouped_entry(sample, pset, cluster_cfg):
    try:
        members, outliers, _ = cluster_box_centers(pset.centers(), cluster_cfg)
    except DegenerateGroupingError:
        members, outliers = [list(range(len(pset.proposals)))], []
    return CorpusEntry(sample=sample, pset=pset, groups=members, outliers=outliers)


def build_training_corpus(cfg):
    src, tgt = synth.build_pair_corpus(
        cfg.scene, cfg.shift, cfg.proposal_noise, cfg.corpus_size, cfg.seed
    )
    source = [_grouped_entry(s, p, cfg.cluster) for s, p in src]
    target = [_grouped_entry(t, p, cfg.cluster) for t, p in tgt]
    return source, target


def build_eval_sets(cfg):
    """Held-out sets: probe train/eval pairs per domain plus a target
    detection set, all on seed streams disjoint from the training corpus."""
    def scenes(domain, offset, n, with_shift):
        out = []
        for i in range(n):
            ss = synth.scene_seed(cfg.seed, domain, offset + i)
            scene_ss, shift_ss, prop_ss = ss.spawn(3)
            s = synth.generate_scene(cfg.scene, seed=scene_ss)
            s.image_id = f"{domain[:3]}e{offset + i}"
            if with_shift:
                s = synth.apply_domain_shift(s, cfg.shift, seed=shift_ss)
            pset = synth.generate_proposals(s, cfg.proposal_noise, seed=prop_ss)
            out.append((s, pset))
        return out

    n = cfg.probe_size
    probe_train = {
        "source": scenes("source", 20_000, n, False),
        "target": scenes("target", 20_000, n, True),
    }
    probe_eval = {
        "source": scenes("source", 30_000, n, False),
        "target": scenes("target", 30_000, n, True),
    }
    detect_eval = scenes("target", 10_000, cfg.eval_size, True)
    return probe_train, probe_eval, detect_eval


# ---------------------------------------------------------------------------
# one optimisation step
# ---------------------------------------------------------------------------

def _branch(name, fn):
    try:
        return fn()
    except FloatingPointError as exc:
        raise TrainingDiverged(f"non-finite value in branch {name}") from exc


def _domain_forward(net, entry, domain, lam, gamma):
    """Shared per-image forward: features, reconstruction pieces,
    level-classifier outputs and region-instance group probabilities."""
    sample = entry.sample
    f1, f2, f3 = net.forward_backbone(sample.rgb)
    d = net.encode_private(sample.gray, domain)
    xhat = net.reconstruct(d, f3)
    p1map, f_l = net.local_domain(ad.grl(f1, lam))
    p2, f_m = net.mid_domain(ad.grl(f2, lam))
    p3, f_g = net.global_domain(ad.grl(f3, lam))
    ctx = ad.concat([f_l.detach(), f_m.detach(), f_g.detach()])
    roi_vecs = [
        nw.crop_pool(f3, p.box, net.spec.stride) for p in entry.pset.proposals
    ]
    group_probs = []
    for members in entry.groups:
        fr = roi_vecs[members[0]] if len(members) == 1 else ad.mean(
            ad.stack([roi_vecs[i] for i in members]), axis=0
        )
        fused = ad.concat([ctx, ad.grl(fr, lam)])
        group_probs.append(net.region_domain(fused))
    return {
        "f3": f3, "d": d, "xhat": xhat, "gray": sample.gray,
        "p1map": p1map, "p2": p2, "p3": p3,
        "roi_vecs": roi_vecs, "group_probs": group_probs,
    }


def train_step(net, source_entry, target_entry, weights, optimizer,
               normalize_rec=True, lam=None):
    """One min-max update on a source/target image pair; returns the loss
    components as floats plus domain-classifier diagnostics."""
    lam = weights.lam if lam is None else lam
    gamma = weights.gamma
    s = _branch("source forward", lambda: _domain_forward(
        net, source_entry, "source", lam, gamma))
    t = _branch("target forward", lambda: _domain_forward(
        net, target_entry, "target", lam, gamma))

    # detector on source proposals
    def detector():
        feats = ad.stack(s["roi_vecs"])
        logits, deltas = net.detector_head(feats)
        boxes = [p.box for p in source_entry.pset.proposals]
        return nw.detector_losses(
            logits, deltas, boxes,
            source_entry.sample.boxes, source_entry.sample.labels,
        )
    l_c, l_r = _branch("detector", detector)

    l_rec = _branch("reconstruction", lambda: (
        L.reconstruction_loss([s["gray"]], [s["xhat"]], normalize=normalize_rec)
        + L.reconstruction_loss([t["gray"]], [t["xhat"]], normalize=normalize_rec)
    ))
    l_diff = _branch("difference", lambda: L.difference_loss(
        [s["d"]], [s["f3"]], [t["d"]], [t["f3"]]
    ))
    l_adv1 = _branch("local adversarial", lambda: L.local_adv_loss(
        [s["p1map"]], [t["p1map"]]
    ))
    # pooled-level classifiers use the same bounded least-squares form as
    # the per-location level (source -> 0, target -> 1)
    l_adv2 = _branch("mid adversarial", lambda: (
        s["p2"] * s["p2"] + (1.0 - t["p2"]) * (1.0 - t["p2"])
    ))
    l_adv3 = _branch("global adversarial", lambda: (
        s["p3"] * s["p3"] + (1.0 - t["p3"]) * (1.0 - t["p3"])
    ))
    l_ri = _branch("region instance", lambda: L.region_instance_loss(
        [s["group_probs"]], [t["group_probs"]], gamma
    ))
    l_lg = l_adv1 + l_adv2 + l_adv3

    total_min = _branch("composite", lambda: (
        l_c + l_r + weights.beta * (l_rec + l_diff) + (l_lg + l_ri)
    ))
    optimizer.zero_grad()
    total_min.backward()
    optimizer.step()

    vals = {
        "L_c": float(l_c.value), "L_r": float(l_r.value),
        "L_rec": float(l_rec.value), "L_diff": float(l_diff.value),
        "L_lg": float(l_lg.value), "L_ri": float(l_ri.value),
    }
    vals["total"] = L.total_objective(
        vals["L_c"], vals["L_r"], vals["L_rec"], vals["L_diff"],
        vals["L_lg"], vals["L_ri"], weights,
    )
    vals["acc_d3"] = 0.5 * (
        float(s["p3"].value <= 0.5) + float(t["p3"].value > 0.5)
    )
    ri_correct = [float(p.value > 0.5) for p in s["group_probs"]] + [
        float(p.value <= 0.5) for p in t["group_probs"]
    ]
    vals["acc_dri"] = float(np.mean(ri_correct))
    if not all(np.isfinite(v) for v in vals.values()):
        raise TrainingDiverged("non-finite loss component in logs")
    return vals


@dataclass
class TrainResult:
    net: nw.SeparationNet
    rows: list
    config: TrainConfig


def train(cfg, source=None, target=None):
    """Run the configured number of steps; returns the net and per-step rows."""
    cfg.validate()
    if source is None or target is None:
        source, target = build_training_corpus(cfg)
    net = nw.SeparationNet(cfg.network, seed=cfg.seed)
    opt = ad.SGD(net.params(), lr=cfg.lr_initial, momentum=cfg.momentum)
    batch_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 17]))
    decay_step = cfg.resolved_decay_step()
    rows = []
    for step in range(cfg.iterations):
        opt.lr = cfg.lr_initial if step < decay_step else cfg.lr_after_decay
        if cfg.lambda_warmup_steps > 0:
            ramp = min(1.0, step / cfg.lambda_warmup_steps)
            lam = cfg.weights.lam * (2.0 / (1.0 + np.exp(-10.0 * ramp)) - 1.0)
        else:
            lam = cfg.weights.lam
        si = int(batch_rng.integers(len(source)))
        ti = int(batch_rng.integers(len(target)))
        vals = train_step(net, source[si], target[ti], cfg.weights, opt,
                          normalize_rec=cfg.normalize_reconstruction, lam=lam)
        vals["step"] = step
        rows.append(vals)
    return TrainResult(net=net, rows=rows, config=cfg)


def source_only_config(cfg):
    """Same run with the separation and adversarial pressure gated off."""
    return replace(
        cfg, weights=L.ObjectiveWeights(beta=0.0, lam=0.0, gamma=cfg.weights.gamma)
    )


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def pooled_features(net, samples):
    out = np.empty((len(samples), net.spec.channels[2]))
    with ad.no_grad():
        for i, sample in enumerate(samples):
            _, _, f3 = net.forward_backbone(sample.rgb)
            out[i] = ad.mean(f3, axis=(1, 2)).value
    return out


def _logistic_fit(x, y, iters=500, lr=0.5, l2=1e-3):
    xb = np.concatenate([x, np.ones((len(x), 1))], axis=1)
    w = np.zeros(xb.shape[1])
    for _ in range(iters):
        z = np.clip(xb @ w, -500.0, 500.0)
        p = 1.0 / (1.0 + np.exp(-z))
        grad = xb.T @ (p - y) / len(y) + l2 * w
        w -= lr * grad
    return w


def probe_domain_accuracy(net, probe_train, probe_eval):
    """Train a fresh logistic probe on frozen pooled shared features and
    report its source/target accuracy on the held-out probe split."""
    xs = pooled_features(net, [s for s, _ in probe_train["source"]])
    xt = pooled_features(net, [s for s, _ in probe_train["target"]])
    x = np.concatenate([xs, xt])
    y = np.concatenate([np.zeros(len(xs)), np.ones(len(xt))])
    mu, sd = x.mean(axis=0), x.std(axis=0) + 1e-8
    w = _logistic_fit((x - mu) / sd, y)
    exs = pooled_features(net, [s for s, _ in probe_eval["source"]])
    ext = pooled_features(net, [s for s, _ in probe_eval["target"]])
    ex = (np.concatenate([exs, ext]) - mu) / sd
    ey = np.concatenate([np.zeros(len(exs)), np.ones(len(ext))])
    xb = np.concatenate([ex, np.ones((len(ex), 1))], axis=1)
    pred = (xb @ w) > 0
    return float((pred == ey.astype(bool)).mean())


def target_match_rate(net, detect_eval):
    """Fraction of target ground-truth boxes matched by a proposal whose
    predicted class is correct and whose refined box reaches IoU >= 0.5."""
    matched = total = 0
    with ad.no_grad():
        for sample, pset in detect_eval:
            _, _, f3 = net.forward_backbone(sample.rgb)
            feats = ad.stack(
                [nw.crop_pool(f3, p.box, net.spec.stride) for p in pset.proposals]
            )
            logits, deltas = net.detector_head(feats)
            pred_cls = logits.value.argmax(axis=1)
            refined = [
                apply_deltas(p.box, deltas.value[i])
                for i, p in enumerate(pset.proposals)
            ]
            for gt_box, gt_label in zip(sample.eval_boxes(), sample.eval_labels()):
                total += 1
                hit = any(
                    pred_cls[i] == gt_label and iou(refined[i], gt_box) >= 0.5
                    for i in range(len(refined))
                )
                matched += int(hit)
    return matched / total if total else 0.0


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

def rows_to_csv_text(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow(
            [r["step"]] + [format(r[c], ".17g") for c in CSV_COLUMNS[1:]]
        )
    return buf.getvalue()


def save_checkpoint(net, out_dir, prefix="checkpoint"):
    """Flat little-endian float64 blob plus a JSON shape manifest."""
    entries, blobs, offset = [], [], 0
    for name, p in net.named_params():
        arr = np.ascontiguousarray(p.value, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.size
    with open(os.path.join(out_dir, f"{prefix}.bin"), "wb") as fh:
        fh.write(b"".join(blobs))
    manifest = {"dtype": "<f8", "total": offset, "params": entries,
                "network": config_to_dict(TrainConfig(network=net.spec))["network"]}
    with open(os.path.join(out_dir, f"{prefix}.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)


def load_checkpoint(net, out_dir, prefix="checkpoint"):
    with open(os.path.join(out_dir, f"{prefix}.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    raw = np.fromfile(os.path.join(out_dir, f"{prefix}.bin"), dtype="<f8")
    if raw.size != manifest["total"]:
        raise ValueError("checkpoint blob size does not match manifest")
    by_name = {e["name"]: e for e in manifest["params"]}
    for name, p in net.named_params():
        e = by_name[name]
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        p.value = raw[e["offset"] : e["offset"] + n].reshape(e["shape"]).copy()
    return net


def run_experiment(cfg, out_dir=None, log=None):
    """Adapted run plus source-only twin, probed under the same protocol.

    Writes losses.csv / losses_source_only.csv, metrics.json and both
    checkpoints when `out_dir` is given; returns the metrics dict.
    """
    adapted = train(cfg)
    baseline = train(source_only_config(cfg))
    probe_train, probe_eval, detect_eval = build_eval_sets(cfg)
    metrics = {
        "probe_accuracy_source_only": probe_domain_accuracy(
            baseline.net, probe_train, probe_eval
        ),
        "probe_accuracy_adapted": probe_domain_accuracy(
            adapted.net, probe_train, probe_eval
        ),
        "target_match_rate": target_match_rate(adapted.net, detect_eval),
        "target_match_rate_source_only": target_match_rate(
            baseline.net, detect_eval
        ),
        "seeds": {"train": cfg.seed},
    }
    if log:
        log(json.dumps(metrics))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "losses.csv"), "w", encoding="utf-8",
                  newline="") as fh:
            fh.write(rows_to_csv_text(adapted.rows))
        with open(os.path.join(out_dir, "losses_source_only.csv"), "w",
                  encoding="utf-8", newline="") as fh:
            fh.write(rows_to_csv_text(baseline.rows))
        with open(os.path.join(out_dir, "metrics.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(metrics, fh, indent=1, sort_keys=True)
            fh.write("\n")
        save_checkpoint(adapted.net, out_dir, prefix="checkpoint")
        save_checkpoint(baseline.net, out_dir, prefix="checkpoint_source_only")
    return metrics


# ---------------------------------------------------------------------------
# gradient checking harness
# ---------------------------------------------------------------------------

def gradcheck_network_spec():
    """Narrow spec keeping finite-difference sweeps cheap."""
    return nw.NetworkSpec(
        channels=(4, 6, 8), d1_hidden=4, d23_hidden=6, dri_hidden=8,
        head_hidden=12,
    )


def build_gradcheck_data(seed):
    """Small fixed source/target pair on a 32x32 canvas."""
    scene = synth.SceneSpec(canvas=(32, 32), object_count_range=(1, 2),
                            radius_range=(4.0, 6.0))
    noise = synth.ProposalNoiseSpec(jitter_std=1.5, redundancy=3,
                                    background_count=1, background_margin=8.0)
    shift = synth.DomainShiftSpec()
    src, tgt = synth.build_pair_corpus(scene, shift, noise, 1, seed)
    cluster = ScaleSweepConfig()
    return (
        _grouped_entry(src[0][0], src[0][1], cluster),
        _grouped_entry(tgt[0][0], tgt[0][1], cluster),
    )


def branch_loss(net, source_entry, target_entry, branch, lam, gamma=5.0):
    """Scalar loss of one named branch at the given GRL coefficient."""
    s = _domain_forward(net, source_entry, "source", lam, gamma)
    t = _domain_forward(net, target_entry, "target", lam, gamma)
    if branch in ("l_c", "l_r"):
        feats = ad.stack(s["roi_vecs"])
        logits, deltas = net.detector_head(feats)
        boxes = [p.box for p in source_entry.pset.proposals]
        l_c, l_r = nw.detector_losses(
            logits, deltas, boxes,
            source_entry.sample.boxes, source_entry.sample.labels,
        )
        return l_c if branch == "l_c" else l_r
    if branch == "l_rec":
        return L.reconstruction_loss([s["gray"]], [s["xhat"]]) + \
            L.reconstruction_loss([t["gray"]], [t["xhat"]])
    if branch == "l_diff":
        return L.difference_loss([s["d"]], [s["f3"]], [t["d"]], [t["f3"]])
    if branch == "l_adv1":
        return L.local_adv_loss([s["p1map"]], [t["p1map"]])
    if branch == "l_adv2":
        return s["p2"] * s["p2"] + (1.0 - t["p2"]) * (1.0 - t["p2"])
    if branch == "l_adv3":
        return s["p3"] * s["p3"] + (1.0 - t["p3"]) * (1.0 - t["p3"])
    if branch == "l_ri":
        return L.region_instance_loss([s["group_probs"]], [t["group_probs"]], gamma)
    if branch == "composite":
        feats = ad.stack(s["roi_vecs"])
        logits, deltas = net.detector_head(feats)
        boxes = [p.box for p in source_entry.pset.proposals]
        l_c, l_r = nw.detector_losses(
            logits, deltas, boxes,
            source_entry.sample.boxes, source_entry.sample.labels,
        )
        l_rec = L.reconstruction_loss([s["gray"]], [s["xhat"]]) + \
            L.reconstruction_loss([t["gray"]], [t["xhat"]])
        l_diff = L.difference_loss([s["d"]], [s["f3"]], [t["d"]], [t["f3"]])
        l_lg = (
            L.local_adv_loss([s["p1map"]], [t["p1map"]])
            + s["p2"] * s["p2"] + (1.0 - t["p2"]) * (1.0 - t["p2"])
            + s["p3"] * s["p3"] + (1.0 - t["p3"]) * (1.0 - t["p3"])
        )
        l_ri = L.region_instance_loss([s["group_probs"]], [t["group_probs"]], gamma)
        return l_c + l_r + 0.1 * (l_rec + l_diff) + (l_lg + l_ri)
    raise ValueError(f"unknown branch {branch!r}")


def finite_difference_check(seed=0, eps=1e-5, coords_per_param=50, branches=None,
                            gamma=5.0):
    """Per-branch finite-difference report for the toy network.

    Non-adversarial branches are checked as-is. Branches containing gradient
    reversal are checked at lam = -1 (GRL exactly transparent), and the
    lam = +1 vs lam = -1 gradient sign symmetry of every parameter upstream
    of a GRL is verified exactly. Returns
    {branch: {"max_rel_err": float, "per_param": {...}, "sign_symmetric": bool}}.
    """
    net = nw.SeparationNet(gradcheck_network_spec(), seed=seed)
    source_entry, target_entry = build_gradcheck_data(seed)
    named = net.named_params()
    report = {}
    for branch in branches or ALL_BRANCHES:
        reversed_branch = branch in REVERSED_BRANCHES or branch == "composite"
        lam = -1.0 if reversed_branch else 0.0

        def build():
            return branch_loss(net, source_entry, target_entry, branch, lam, gamma)

        per_param = nw.finite_difference_report(
            named, build, eps=eps, coords_per_param=coords_per_param,
            rng=np.random.default_rng(seed + 1),
        )
        entry = {
            "max_rel_err": max(per_param.values()),
            "per_param": per_param,
        }
        if branch in REVERSED_BRANCHES:
            entry["sign_symmetric"] = _check_sign_symmetry(
                net, named, source_entry, target_entry, branch, gamma
            )
        report[branch] = entry
    return report


def _grads_at(net, named, source_entry, target_entry, branch, lam, gamma):
    for _, p in named:
        p.grad = None
    branch_loss(net, source_entry, target_entry, branch, lam, gamma).backward()
    return [
        (p.grad.copy() if p.grad is not None else np.zeros_like(p.value))
        for _, p in named
    ]


def _check_sign_symmetry(net, named, source_entry, target_entry, branch, gamma):
    """Feature-side gradients must negate exactly between lam = +-1 while
    classifier-side gradients are identical."""
    g_pos = _grads_at(net, named, source_entry, target_entry, branch, 1.0, gamma)
    g_neg = _grads_at(net, named, source_entry, target_entry, branch, -1.0, gamma)
    upstream = ("backbone.", "enc_s.", "enc_t.", "decoder.")
    ok = True
    for (name, _), gp, gn in zip(named, g_pos, g_neg):
        if name.startswith(upstream):
            ok &= np.array_equal(gp, -gn)
        else:
            ok &= np.array_equal(gp, gn)
    return bool(ok)
