"""Static / dynamic-sign-only / fully-dynamic ablation on CIFAR-10.

Trains the three CIFAR backbone variants for several seeds with the two-step
protocol and writes results/ablation.json after every run (rerunning resumes).
The defaults are sized for a single CPU core: a 10k-image training subset,
4 epochs per phase, full 10k-image test set.

Run: python demos/ablation.py [cifar_dir] [--epochs N] [--train-limit N]
"""

import argparse
import logging
from pathlib import Path

from dybnn.ablation import AblationSettings, run_ablation, summarize
from dybnn.datasets import load_dataset

parser = argparse.ArgumentParser()
parser.add_argument("data", nargs="?")
parser.add_argument("--epochs", type=int, default=4)
parser.add_argument("--train-limit", type=int, default=10000)
parser.add_argument("--seeds", type=int, default=5)
parser.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "results" / "ablation.json"))
args = parser.parse_args()

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

settings = AblationSettings(
    backbone="cifar",
    seeds=tuple(range(args.seeds)),
    train={"epochs": args.epochs, "batch_size": 64, "initial_lr": 5e-4, "protocol": "two-step",
           "eval_every": args.epochs},
    train_limit=args.train_limit,
)
train, test = load_dataset("cifar10", args.data)
Path(args.out).parent.mkdir(parents=True, exist_ok=True)
doc = run_ablation(settings, train, test, args.out)
for line in summarize(doc).lines():
    print(line)
