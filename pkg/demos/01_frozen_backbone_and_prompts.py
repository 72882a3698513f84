"""Walk through the pieces that sit on a frozen encoder pair.

A tiny synthetic backbone stands in for CLIP. We check that zero visual
prompts leave the image encoder untouched, build a prompt learner, and look
at how per-class prompts are laid out.
"""

import torch

from attrprompt import ClassVocabulary, ModelConfig, SyntheticBackbone
from attrprompt.data import overfit_rig

backbone = SyntheticBackbone(seed=0)
print(f"backbone: width {backbone.vision_width}, {backbone.num_layers} layers, "
      f"joint dim {backbone.embed_dim}, tau {backbone.tau}")
print("frozen fingerprint:", backbone.fingerprint_frozen_weights()[:16])

rig = overfit_rig(backbone)
image = rig.records[0].image

# With no prompt tokens the prompted encoder is the plain encoder, bit for bit.
empty = backbone.make_visual_prompts(count=0, depth=1)
same = torch.equal(backbone.encode_image(image), backbone.encode_image(image, empty))
print("n=0 visual prompts reproduce the plain encoder:", same)

model = ModelConfig(context_length=2, heads=2, visual_tokens=1, visual_depth=1).build(backbone, seed=0)
for name, params in model.groups().items():
    print(f"  trainable group {name:<15} {sum(p.numel() for p in params):>4} values")

vocab = ClassVocabulary(["kiwi", "zz"], backbone)
out = model(torch.as_tensor(image.pixels)[None], vocab)
for name, prompt in zip(vocab.names, out["prompts"]):
    print(f"prompt for {name!r}: {tuple(prompt.shape[-2:])} = 2 context rows + 1 attribute row "
          f"+ {prompt.shape[-2] - 3} class-token rows")
shared = torch.equal(out["prompts"][0][:, :3], out["prompts"][1][:, :3])
print("classes share the first M+1 rows:", shared)
