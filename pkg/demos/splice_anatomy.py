"""Build one half-truth clip by hand and look at where the fake segment shows up.

Run: python demos/splice_anatomy.py
"""

import numpy as np

from halftruth.corpus import SynthesisConfig, make_half_truth, recover_boundaries, synth_fake, synth_real
from halftruth.features import N_FRAMES, bin_frequencies, extract_features, stft_power

cfg = SynthesisConfig()
seed = 7
real = synth_real(seed, cfg)
fake = synth_fake(seed, cfg)
clip, (start, end) = make_half_truth(real, fake, start_s=1.5, dur_s=1.0)
print(f"splice written at {start * 4:.3f}-{end * 4:.3f} s")

# the splice is sample exact, so diffing against the real clip recovers it
rec = recover_boundaries(clip, real)
print(f"recovered from the waveform: {rec[0] * 4:.3f}-{rec[1] * 4:.3f} s")

# the comb artefact lives above 4 kHz; track its energy frame by frame
power = stft_power(clip)
high = power[bin_frequencies() >= 4000].sum(axis=0)
ratio = high / power.sum(axis=0)
times = np.arange(N_FRAMES) * 256 / 16000
inside = (times >= 1.5) & (times < 2.5)
print(f"high-band share inside the splice:  {ratio[inside].mean():.4f}")
print(f"high-band share outside the splice: {ratio[~inside].mean():.4f}")

feats = extract_features(clip)
print("feature shapes:", feats.mfcc.shape, feats.lfcc.shape, feats.chroma.shape)
