"""From pixels to the backbone's input sequence.

A 378 x 378 image cut into 14 x 14 patches gives a 27 x 27 grid: 729 visual
tokens through the MLP projector, 196 after the token-reducing (pooling)
projector. The question is wrapped in the chat template and appended.
"""

import numpy as np

from cobra_ssm import CobraConfig, Conversation, ImageInput, init_cobra, render
from cobra_ssm.model import build_sequence, encode_image, project_visual

img = ImageInput(np.random.default_rng(2).random((3, 378, 378)))
conv = Conversation.single("What is written?", ocr="STOP", ordering="ocr_first")

for projector in ("mlp", "ldp"):
    model = init_cobra(CobraConfig(projector=projector))
    feats = encode_image(model, img)
    visual = project_visual(model, feats)
    seq = build_sequence(model, visual, conv, "chat")
    print(f"{projector}: features {feats.features.shape} -> {visual.num_tokens} visual tokens, "
          f"sequence length {len(seq)}")

print("\nchat prompt:", repr(render(conv, "chat")))
print("base prompt:", repr(render(conv, "base")))
print("OCR after the question:",
      repr(render(Conversation.single("What is written?", ocr="STOP", ordering="ocr_last"), "chat")))
