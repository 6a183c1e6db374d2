"""Neural packets: measure (dx, dp) of a trained classifier.

Freezes a trained model, fixes the focus class and the mean training
image as the baseline, then slices the loss along individual pixels.
Each normalized slice is a 1-D wave packet whose spreads sigma_x (input
direction) and sigma_p (gradient direction) obey sigma_x * sigma_p >= 1/2.

Run:  python demos/03_neural_packets.py   (after demo 01, or it retrains)
"""

from pathlib import Path

import numpy as np

from packetlab import data, nn, synthdata, uncertainty

DATA = Path("demo-data/digits")

if not (DATA / "train-images-idx3-ubyte").exists():
    synthdata.make_digits_dataset(DATA, n_train=4000, n_test=800, seed=0)

train_ds = data.subset(data.load_mnist(DATA, "train"), 3000, seed=0)
model = nn.build_model("cnn3-mnist", seed=0)
nn.train(model, train_ds, nn.TrainConfig(lr=0.05, batch_size=64, epochs=3,
                                         seed=0))

x_base = data.compute_baseline(train_ds).x_base
rng = np.random.default_rng(0)
dims = sorted(int(i) for i in rng.choice(784, size=8, replace=False))

cfg = uncertainty.QuadratureConfig(n=2048, seed=0)
stats, skipped = uncertainty.measure_dimensions(model, 8, x_base, dims, cfg)

print("per-pixel packets for class 8 (baseline = mean training image):")
print(f"{'dim':>5} {'sigma_x':>9} {'sigma_p':>9} {'product':>9} {'>=0.5?':>7}")
for st in stats:
    print(f"{st.dim:>5} {st.sx:>9.4f} {st.sp:>9.4f} {st.product:>9.4f}"
          f" {'yes' if st.product >= 0.5 else 'NO':>7}")
if skipped:
    print("degenerate dimensions skipped and resampled:", skipped)

report = uncertainty.aggregate(stats)
print(f"\naggregate over {len(stats)} dimensions: "
      f"dx = {report.dx:.4f} +- {report.dx_se:.4f}, "
      f"dp = {report.dp:.4f} +- {report.dp_se:.4f}")
