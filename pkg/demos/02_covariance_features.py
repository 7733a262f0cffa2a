"""From a multi-baseline stack to the network's real-valued input channels.

Shows the channel bookkeeping: a full-pol 6-baseline stack has 18 complex
channels, an 18 x 18 covariance per pixel, and 3*18 - 2 = 52 real feature
channels (diagonal + first row split into real/imag parts).

Run:  python demos/02_covariance_features.py
"""
import numpy as np

from tomoheight import (
    estimate_covariance,
    extract_features,
    features_from_stack,
    feature_channel_count,
    make_scene,
    normalize_features,
    pol_count,
    select_polarizations,
)

stack, truth = make_scene("paracou-like", size=96, seed=3)

for mode in ("FP", "HHVV", "HV"):
    sub = select_polarizations(stack, mode)
    c = sub.data.shape[2]
    m = feature_channel_count(pol_count(mode), 6)
    print(f"{mode:5s}: {c:2d} complex channels -> covariance {c}x{c} "
          f"-> M = {m} feature channels")

sub = select_polarizations(stack, "HHVV")
cov = estimate_covariance(sub.data, window=9)
feats = extract_features(cov)
print("\nfeature cube:", feats.data.shape)
print("first channels:", feats.channel_names[:3], "...", feats.channel_names[-2:])

# the fast path never materializes the full covariance field
fast = features_from_stack(sub.data, window=9)
print("fast path max deviation:", np.abs(fast.data - feats.data).max())

normalized, stats = normalize_features(feats.data)
print("\nafter standardization: per-channel mean ~",
      np.abs(normalized.reshape(-1, feats.m).mean(axis=0)).max(),
      "std ~", normalized.reshape(-1, feats.m).std(axis=0)[:3])
print("raw channel scales spanned",
      f"{stats.std.min():.3g} .. {stats.std.max():.3g}",
      "(why the network wants standardized inputs)")
