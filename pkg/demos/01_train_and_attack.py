"""Train a small digit classifier and attack it with FGSM and PGD.

Generates a local stand-in digit dataset (real MNIST IDX format), trains
the three-block CNN for a few epochs, then compares clean accuracy with
accuracy under gradient attacks at a fixed L-inf budget.

Run from the repository root:  python demos/01_train_and_attack.py
"""

from pathlib import Path

from packetlab import attacks, data, nn, synthdata

DATA = Path("demo-data/digits")

if not (DATA / "train-images-idx3-ubyte").exists():
    print("generating stand-in digit data ...")
    synthdata.make_digits_dataset(DATA, n_train=4000, n_test=800, seed=0)

train_ds = data.subset(data.load_mnist(DATA, "train"), 3000, seed=0)
test_ds = data.load_mnist(DATA, "test")

model = nn.build_model("cnn3-mnist", seed=0)
cfg = nn.TrainConfig(lr=0.05, batch_size=64, epochs=4, seed=0)
nn.train(model, train_ds, cfg,
         on_epoch=lambda e, l: print(f"epoch {e + 1}: mean loss {l:.4f}"))

print(f"\nclean test accuracy: {nn.accuracy(model, test_ds):.4f}")

eval_ds = data.subset(test_ds, 400, seed=1)
for kind, cfg_a in [
    ("FGSM (signed)", attacks.AttackConfig(kind="fgsm", epsilon=0.1)),
    ("FGSM (unsigned)", attacks.AttackConfig(kind="fgsm", epsilon=0.1,
                                             signed=False)),
    ("PGD 4 steps", attacks.AttackConfig(kind="pgd", epsilon=0.1,
                                         alpha=0.025, steps=4)),
]:
    robust = attacks.robust_accuracy(model, eval_ds, cfg_a)
    success = attacks.attack_success_rate(model, eval_ds, cfg_a)
    print(f"{kind:16s} eps=0.1: robust accuracy {robust:.4f}, "
          f"success rate {success:.4f}")
