"""Fusion-mode ablation on the synthetic set.

Trains every fusion mode on the same subject split for several seeds and prints
held-out accuracy per mode. Settings match the smoke-training acceptance run.
"""
import argparse
import tempfile
from dataclasses import replace

import numpy as np

from mfevit.config import FUSION_MODES, AugmentationConfig, ExperimentConfig, ModelConfig, TrainConfig
from mfevit.harness import Dataset, evaluate, train_fold
from mfevit.pipeline import generate_synthetic

MODEL = ModelConfig(image_size=32, patch_size=8, embed_dim=64, num_layers=4, num_heads=4,
                    num_subclasses=5, delta=0.4)
TRAIN = TrainConfig(epochs=10, batch_size=16, lr=2e-3, sf_start_epoch=3)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--held-out", type=int, default=2, help="subjects kept for testing")
    args = ap.parse_args()
    acc = {m: [] for m in FUSION_MODES}
    for seed in range(args.seeds):
        with tempfile.TemporaryDirectory() as tmp:
            data = Dataset.from_manifest(generate_synthetic(tmp, 10, 4, seed=seed, noise_frac=0.1, image_size=32), 32)
        subjects = sorted(set(data.subject_ids))
        train, test = data.subset(subjects[args.held_out:]), data.subset(subjects[:args.held_out])
        for mode in FUSION_MODES:
            cfg = ExperimentConfig(replace(MODEL, fusion_mode=mode), AugmentationConfig(), replace(TRAIN, seed=seed))
            result = train_fold(train, cfg)
            acc[mode].append(evaluate(result.params, test, cfg.model).accuracy)
            print(f"seed {seed}  {mode:<12} {acc[mode][-1]:.3f}", flush=True)
    print()
    for mode in FUSION_MODES:
        print(f"{mode:<12} mean {np.mean(acc[mode]):.3f}  std {np.std(acc[mode]):.3f}")


if __name__ == "__main__":
    main()
