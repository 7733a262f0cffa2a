"""End-to-end desk-scale run: simulate, build patches, train, invert, score.

A reduced U-Net (base 8, single-pol features) is trained for a few epochs
on a 192 x 192 scene with a held-out 64 x 64 test rectangle, then compared
against beamforming on the same rectangle.  Takes a couple of minutes on
one CPU core; raise the epoch count for a better model.

Run:  python demos/04_train_a_small_model.py
"""
import numpy as np

import tomoheight as th
from tomoheight.config import config_from_dict
from tomoheight.dataset import average_reference, build_dataset
from tomoheight.spectral import baseline_height_maps
from tomoheight.training import predict_map, rmse, train

SEED = 7
WINDOW, PATCH = 9, 64
RECT = (0, 0, 64, 64)

cfg = config_from_dict({
    "mode": "HV",
    "window": WINDOW,
    "patch": PATCH,
    "network": {"base_channels": 8, "levels": 4},
    "training": {"lr": 0.01, "batch": 4, "epochs": 25, "seed": SEED},
})

print("simulating a 192x192 scene...")
stack, truth = th.make_scene("paracou-like", size=192, seed=SEED)
sub = th.select_polarizations(stack, cfg.mode)
feats = th.features_from_stack(sub.data, WINDOW).data.astype(np.float32)

ds = build_dataset(
    feats, {"dtm": truth.ground, "chm": truth.canopy},
    window=WINDOW, w=PATCH, test_rect=RECT, seed=SEED, mode=cfg.mode,
)
print(f"patches: {len(ds.train)} train / {len(ds.val)} val / {len(ds.test)} test; "
      f"classes: { {t: q.k for t, q in ds.quantizers.items()} }")

print("training the ground-height model...")
state, report = train(ds, cfg, targets=("dtm",))
print(f"  best epoch {report.best_epoch}, val acc "
      f"{report.rows[report.best_epoch].val_acc:.2f}")

r0, c0, rh, cw = RECT
pred = predict_map(state, feats[r0:r0 + rh, c0:c0 + cw], tile=PATCH, overlap=32)["dtm"]
ref = average_reference(truth.ground, WINDOW)[r0:r0 + rh, c0:c0 + cw]
net_rmse = rmse(pred, ref)

bf_ground, _ = baseline_height_maps(
    sub.data[:rh + 4, :cw + 4], sub.geometry, cfg.mode, WINDOW, method="beamforming"
)
bf_rmse = rmse(bf_ground[:rh, :cw], ref)

print(f"\nground-height RMSE on the held-out rectangle:")
print(f"  learned model : {net_rmse:.2f} m")
print(f"  beamforming   : {bf_rmse:.2f} m")
