"""Pilot run for the smoke-training settings: prints accuracy and relabel rates."""
import argparse
import logging
import tempfile
import time

import numpy as np

from mfevit.config import AugmentationConfig, ExperimentConfig, ModelConfig, TrainConfig
from mfevit.harness import Dataset, evaluate, train_fold
from mfevit.pipeline import generate_synthetic


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--mode", default="alternative")
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--start", type=int, default=5)
    ap.add_argument("--delta", type=float, default=0.4)
    ap.add_argument("--wd", type=float, default=0.05)
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--no-aug", action="store_true")
    ap.add_argument("--no-sf", action="store_true")
    ap.add_argument("-v", action="store_true")
    args = ap.parse_args()
    if args.v:
        logging.basicConfig(level=logging.INFO)
    with tempfile.TemporaryDirectory() as tmp:
        manifest = generate_synthetic(tmp, 10, 4, seed=args.seed, noise_frac=0.1, image_size=32)
        data = Dataset.from_manifest(manifest, 32)
    subjects = sorted(set(data.subject_ids))
    test_s, train_s = subjects[:2], subjects[2:]
    cfg = ExperimentConfig(
        ModelConfig(image_size=32, patch_size=8, embed_dim=64, num_layers=4, num_heads=4,
                    num_subclasses=5, delta=args.delta, fusion_mode=args.mode),
        AugmentationConfig(augment=not args.no_aug),
        TrainConfig(epochs=args.epochs, lr=args.lr, sf_start_epoch=args.start, seed=args.seed,
                    batch_size=args.batch, weight_decay=args.wd, sf_enabled=not args.no_sf),
    )
    t0 = time.time()
    train = data.subset(train_s)
    res = train_fold(train, cfg)
    test = data.subset(test_s)
    ev = evaluate(res.params, test, cfg.model)
    clean = ~test.noisy
    acc_clean = float((ev.predictions[clean] == ev.truth[clean]).mean())
    sub = np.array([res.states[s].is_subclass for s in train.sample_ids])
    ever = np.array([any(new >= 6 for _, _, new in res.states[s].relabel_history) for s in train.sample_ids])
    print(f"time {time.time()-t0:.1f}s  test acc {ev.accuracy:.3f} clean {acc_clean:.3f} "
          f"noisy-in-test {int(test.noisy.sum())}")
    print(f"noisy in subclass {sub[train.noisy].mean():.2f} (ever {ever[train.noisy].mean():.2f}); "
          f"clean relabeled {ever[~train.noisy].mean():.3f}; losses {[round(h.loss,3) for h in res.history]}")
    print("relabels/epoch", [h.relabels for h in res.history])


if __name__ == "__main__":
    main()
