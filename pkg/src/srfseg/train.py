"""Training loop, evaluation, and the four-variant comparison runner.

Optimizer is momentum SGD with a poly step-size schedule
lr * (1 - step/max_steps)^power.  Every run is a pure function of
(config, seed): scene synthesis, batch order, and anchor sampling all
derive from named SeedSequence streams, so re-running a command with the
same config reproduces byte-identical CSVs and checkpoints.
"""

import os
import time

import numpy as np

from . import config as cfgmod
from .data import generate_scene, write_image, write_labels
from .engine import ops
from .engine.checkpoint import load_checkpoint, save_checkpoint
from .engine.params import ParamStore
from .engine.tensor import Tensor, backward, get_dtype
from .errors import DivergenceError, EmptyBatchError, IoError
from .losses import (EmbeddingHead, contrastive_loss, cross_entropy,
                     downsample_labels, sample_anchors, total_loss)
from .metrics import boundary_f, confusion, miou
from .net import SegmentationNet

_BATCH_TAG = 0x62617463

OPTIMIZER_NOTE = "optimizer: momentum SGD (mu=0.9), poly schedule power 0.9"

VARIANT_ROWS = (
    ("baseline", "bilinear", "none"),
    ("+srm", "srm", "none"),
    ("+crm", "bilinear", "crm"),
    ("both", "srm", "crm"),
)


def build_model(config):
    """Fresh parameter store + network + embedding head for a run config."""
    store = ParamStore(config.seed)
    net = SegmentationNet(cfgmod.net_config(config), store,
                          upsampler=config.variant.upsampler,
                          context=config.variant.context)
    embed = EmbeddingHead(store, "embed", config.net.decoder_width,
                          dim=config.net.embedding_dim)
    return store, net, embed


def _make_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
        probe = os.path.join(path, ".write_probe")
        with open(probe, "wb"):
            pass
        os.remove(probe)
    except OSError as e:
        raise IoError(f"output directory {path} is not writable: {e}") from e


def _batch(spec, indices, dtype):
    images, labels = [], []
    for i in indices:
        img, lab = generate_scene(spec, int(i))
        images.append(img)
        labels.append(lab)
    return np.stack(images).astype(dtype), np.stack(labels).astype(np.int64)


def _sgd_update(store, gmap, lr, momentum):
    for p in store:
        g = gmap.get(p.tensor.node_id)
        if g is None:
            continue
        p.velocity = momentum * p.velocity + g.data
        p.tensor.data = p.tensor.data - lr * p.velocity


def batch_loss(net, embed, images, labels, config, anchor_seed):
    """Forward pass producing the combined LossReport for one batch."""
    logits, feat = net.forward(images, return_features=True)
    ce = cross_entropy(logits, labels)
    emb = embed.forward(feat)
    lab4 = downsample_labels(labels, 4)
    pred4 = downsample_labels(np.argmax(logits.data, axis=1), 4)
    try:
        anchors = sample_anchors(emb, lab4, pred4, budget=config.loss.anchors,
                                 seed=anchor_seed)
        cl = contrastive_loss(anchors, tau=config.loss.tau)
    except EmptyBatchError:
        # a batch can lack usable anchor pairs; the term just drops out
        cl = Tensor(np.zeros((), dtype=get_dtype()))
    return total_loss(ce, cl, lam=config.loss.lam, tau=config.loss.tau)


def run_train(config, log=print):
    """Train per config; returns the final checkpoint path."""
    out = config.out
    _make_dir(out)
    cfgmod.save(os.path.join(out, "config.txt"), config)
    store, net, embed = build_model(config)
    spec = cfgmod.scene_spec(config)
    steps = config.train.steps
    interval = config.train.checkpoint_interval
    dtype = get_dtype()

    rows = []
    started = time.time()
    for step in range(steps):
        rng = np.random.default_rng(
            np.random.SeedSequence([config.seed, _BATCH_TAG, step]))
        idx = rng.integers(0, config.data.train_scenes, size=config.train.batch_size)
        images, labels = _batch(spec, idx, dtype)
        report = batch_loss(net, embed, images, labels, config,
                            anchor_seed=config.seed * 1_000_003 + step)
        total = float(report.total.data)
        if not np.isfinite(total):
            raise DivergenceError(f"non-finite total loss at step {step}")
        gmap = backward(report.total)
        lr = config.optim.lr * (1.0 - step / steps) ** config.optim.poly_power
        _sgd_update(store, gmap, lr, config.optim.momentum)
        rows.append((step, float(report.ce.data), float(report.cl.data), total, lr))
        if interval > 0 and (step + 1) % interval == 0 and step + 1 != steps:
            save_checkpoint(os.path.join(out, f"ckpt_{step + 1:06d}.srf"), store.state())
        if log and (step + 1) % 100 == 0:
            rate = (time.time() - started) / (step + 1)
            log(f"step {step + 1}/{steps}  ce {report.ce.data:.4f}  "
                f"cl {report.cl.data:.4f}  total {total:.4f}  ({rate * 1e3:.0f} ms/step)")

    csv_path = os.path.join(out, "metrics.csv")
    try:
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write("step,ce,cl,total,lr\n")
            for step, ce, cl, total, lr in rows:
                fh.write(f"{step},{ce!r},{cl!r},{total!r},{lr!r}\n")
    except OSError as e:
        raise IoError(f"cannot write {csv_path}: {e}") from e
    final = os.path.join(out, "ckpt_final.srf")
    save_checkpoint(final, store.state())
    return final


def run_eval(config, checkpoint=None, oracle=False, dump=False, log=print):
    """Evaluate on the held-out scene range; returns the metrics dict."""
    out = config.out
    _make_dir(out)
    spec = cfgmod.scene_spec(config)
    dtype = get_dtype()
    if not oracle:
        store, net, _ = build_model(config)
        if checkpoint is not None:
            store.load_state(load_checkpoint(checkpoint))

    num_classes = config.net.num_classes
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    bf1s, bf3s = [], []
    start = config.data.train_scenes
    indices = list(range(start, start + config.data.eval_scenes))
    batch = max(config.train.batch_size, 1)
    dump_dir = os.path.join(out, "predictions")
    if dump:
        _make_dir(dump_dir)
    for lo in range(0, len(indices), batch):
        chunk = indices[lo:lo + batch]
        images, labels = _batch(spec, chunk, dtype)
        if oracle:
            preds = labels.astype(np.uint8)
        else:
            preds = net.segment(images)
        conf += confusion(preds, labels, num_classes)
        for j, scene_index in enumerate(chunk):
            bf1s.append(boundary_f(preds[j], labels[j], tol=1))
            bf3s.append(boundary_f(preds[j], labels[j], tol=3))
            if dump:
                write_image(os.path.join(dump_dir, f"scene_{scene_index:04d}.ppm"), images[j])
                write_labels(os.path.join(dump_dir, f"pred_{scene_index:04d}.pgm"), preds[j])

    per_class, mean_iou = miou(conf)
    bf1 = float(np.mean(bf1s))
    bf3 = float(np.mean(bf3s))
    result = {"per_class": per_class.tolist(), "miou": mean_iou,
              "boundary_f_tol1": bf1, "boundary_f_tol3": bf3,
              "scenes": len(indices)}

    lines = [f"evaluation over {len(indices)} held-out scenes "
             f"(indices {start}..{start + len(indices) - 1})",
             f"variant: upsampler={config.variant.upsampler} context={config.variant.context}",
             OPTIMIZER_NOTE]
    for c, iou in enumerate(per_class):
        lines.append(f"class_{c}_iou,{'nan' if np.isnan(iou) else repr(float(iou))}")
    lines.append(f"miou,{mean_iou!r}")
    lines.append(f"boundary_f_tol1,{bf1!r}")
    lines.append(f"boundary_f_tol3,{bf3!r}")
    if log:
        log("\n".join(lines))

    csv_path = os.path.join(out, "eval.csv")
    try:
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write("name,value\n")
            for c, iou in enumerate(per_class):
                fh.write(f"class_{c}_iou,{'nan' if np.isnan(iou) else repr(float(iou))}\n")
            fh.write(f"miou,{mean_iou!r}\n")
            fh.write(f"boundary_f_tol1,{bf1!r}\n")
            fh.write(f"boundary_f_tol3,{bf3!r}\n")
    except OSError as e:
        raise IoError(f"cannot write {csv_path}: {e}") from e
    return result


def _fmt_pm(mean, std):
    return f"{mean:.4f} +/- {std:.4f}"


def run_ablate(config, log=print):
    """Train and evaluate the four decoder variants over R seeds."""
    out = config.out
    _make_dir(out)
    repeats = config.ablate.seeds
    results = {}
    for row_name, upsampler, context in VARIANT_ROWS:
        per_seed = []
        for r in range(repeats):
            sub = config.model_copy(deep=True)
            sub = sub.model_copy(update={
                "seed": config.seed + r,
                "out": os.path.join(out, row_name.replace("+", "plus_"), f"seed{config.seed + r}"),
                "variant": cfgmod.VariantConfig(upsampler=upsampler, context=context),
            })
            if log:
                log(f"[{row_name}] seed {sub.seed}: training {sub.train.steps} steps")
            ckpt = run_train(sub, log=None)
            eval_cfg = sub.model_copy(update={"out": os.path.join(sub.out, "eval")})
            metrics = run_eval(eval_cfg, checkpoint=ckpt, log=None)
            per_seed.append(metrics)
            if log:
                log(f"[{row_name}] seed {sub.seed}: miou {metrics['miou']:.4f} "
                    f"bf1 {metrics['boundary_f_tol1']:.4f}")
        results[row_name] = per_seed

    def stats(key):
        table = {}
        for row_name, _, _ in VARIANT_ROWS:
            vals = np.array([m[key] for m in results[row_name]], dtype=np.float64)
            std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
            table[row_name] = (float(vals.mean()), std)
        return table

    miou_stats = stats("miou")
    bf1_stats = stats("boundary_f_tol1")
    bf3_stats = stats("boundary_f_tol3")

    csv_path = os.path.join(out, "ablation.csv")
    try:
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write("variant,upsampler,context,seeds,miou_mean,miou_std,"
                     "bf1_mean,bf1_std,bf3_mean,bf3_std\n")
            for row_name, upsampler, context in VARIANT_ROWS:
                mm, ms = miou_stats[row_name]
                b1m, b1s = bf1_stats[row_name]
                b3m, b3s = bf3_stats[row_name]
                fh.write(f"{row_name},{upsampler},{context},{repeats},"
                         f"{mm!r},{ms!r},{b1m!r},{b1s!r},{b3m!r},{b3s!r}\n")
    except OSError as e:
        raise IoError(f"cannot write {csv_path}: {e}") from e

    base_miou = miou_stats["baseline"][0]
    header = (f"four-variant comparison, {repeats} seed(s) starting at {config.seed}, "
              f"{config.train.steps} steps each")
    lines = [header, OPTIMIZER_NOTE,
             "variants: upsampler in (bilinear, srm); context in (none, crm)",
             "",
             f"{'variant':<10} {'upsampler':<10} {'context':<8} "
             f"{'mIoU':<19} {'dIoU':<8} {'boundary-F@1':<19} {'boundary-F@3':<19}"]
    for row_name, upsampler, context in VARIANT_ROWS:
        mm, ms = miou_stats[row_name]
        b1m, b1s = bf1_stats[row_name]
        b3m, b3s = bf3_stats[row_name]
        lines.append(f"{row_name:<10} {upsampler:<10} {context:<8} "
                     f"{_fmt_pm(mm, ms):<19} {mm - base_miou:+.4f}  "
                     f"{_fmt_pm(b1m, b1s):<19} {_fmt_pm(b3m, b3s):<19}")
    table = "\n".join(lines) + "\n"
    txt_path = os.path.join(out, "ablation.txt")
    try:
        with open(txt_path, "w", encoding="utf-8") as fh:
            fh.write(table)
    except OSError as e:
        raise IoError(f"cannot write {txt_path}: {e}") from e
    if log:
        log(table)
    return {"miou": miou_stats, "boundary_f_tol1": bf1_stats,
            "boundary_f_tol3": bf3_stats, "csv": csv_path, "table": txt_path}
