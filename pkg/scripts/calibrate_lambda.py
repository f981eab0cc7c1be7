"""Pick the default BN-term weight for pixel recovery.

Trains the desk-scale convnet-small teacher on digits32 and measures CE / L_BN
on noise-initialized batches; that ratio puts ``bn_weight * L_BN`` on the same
scale as CE at initialization.
"""
import argparse
import math

from ddbench.archs import ModelSpec
from ddbench.datahub import load_dataset
from ddbench.synth import balanced_bn_weight
from ddbench.teachers import TeacherRecipe, train_teacher


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--seeds", type=int, default=3)
    args = ap.parse_args()
    train, test, spec = load_dataset("digits32")
    teacher = train_teacher(ModelSpec("convnet-small", spec.resolution, spec.num_classes), train,
                            TeacherRecipe(epochs=args.epochs, batch_size=64), test, "digits32")
    print(f"teacher test accuracy {teacher.test_accuracy:.2f}")
    ratios = [balanced_bn_weight(teacher, seed=s) for s in range(args.seeds)]
    for s, r in enumerate(ratios):
        print(f"seed {s}: ce/bn = {r:.4g}")
    geo = math.exp(sum(math.log(r) for r in ratios) / len(ratios))
    print(f"suggested bn_weight {geo:.3g}")


if __name__ == "__main__":
    main()
