"""Train on the small synthetic fixture and report held-out FPR95.

    python3 scripts/overfit_demo.py --epochs 40
"""
import argparse

import numpy as np

from mrdesc import dataset as ds
from mrdesc import eval as ev
from mrdesc import train as tr


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=10)
    ap.add_argument("--per-point", type=int, default=4)
    ap.add_argument("--scene-seed", type=int, default=7)
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--batches", type=int, default=1, help="batches per epoch")
    ap.add_argument("--lr", type=float, default=0.01)
    ap.add_argument("--perturb", action="store_true", help="apply random rotation/scale to every patch")
    args = ap.parse_args()

    scene = ds.gen_synth(args.points, args.per_point, seed=args.scene_seed)
    config = tr.TrainConfig(epochs=args.epochs, batches_per_epoch=args.batches, learning_rate=args.lr,
                            perturb=args.perturb)
    print("epoch\tmean_loss\tpos_mean_dist\tneg_mean_dist\tsubstitutions\twall_seconds")
    state = tr.fit(config, [scene], progress=lambda s: print(s.line(), flush=True))

    desc = ds.describe_patches(state.net, scene, np.arange(len(scene))).astype(np.float64)
    held = scene.test_pairs
    dist = ev.pair_distances(desc, desc, held)
    pos, neg = dist[held[:, 2] == 1], dist[held[:, 2] == 0]
    print(f"held-out pairs\t{len(pos)} matching / {len(neg)} non-matching")
    print(f"fpr95\t{ev.fpr95(dist, held[:, 2]):.4f}")
    print(f"max matching distance\t{pos.max():.4f}")
    print(f"min non-matching distance\t{neg.min():.4f}")


if __name__ == "__main__":
    main()
