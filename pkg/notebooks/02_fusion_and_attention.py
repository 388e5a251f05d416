"""Frame differences, multiscale fusion and the scale-attention weights on one clip.

Run with ``python notebooks/02_fusion_and_attention.py``.
"""
import numpy as np

from msfmamba.aswm import aggregate
from msfmamba.mcfm import central_frame_diff, mcfm_forward, reshape_to_grid
from msfmamba.model import MSFMamba, ModelConfig
from msfmamba.synthgen import SynthSpec, generate_clip

spec = SynthSpec()
still, _ = generate_clip(SynthSpec(noise_sigma=0.0), spec.classes - 1, 0)  # the static class
moving, _ = generate_clip(spec, 3, 0)  # circular orbit

model = MSFMamba(ModelConfig.from_preset("desk"), seed=0)
for name, clip in (("static", still), ("orbit", moving)):
    h = model.encode(clip)
    grid = reshape_to_grid(h)
    motion = central_frame_diff(grid).data
    print(f"{name}: mean |CFD| of latent grid {np.abs(motion).mean():.2e}")

# At initialization the attention head is zero, so every scale gets weight 1/3.
bank = mcfm_forward(model.encode(moving), model.scales, "central")
_, alpha = aggregate(bank, model.aswm, "aswm")
print("alpha range at init:", alpha.data.min(), alpha.data.max())
