"""Fine-tune a toy model until it can answer questions about coloured squares.

Each synthetic image is grey with one coloured quadrant; the questions ask for
the colour or the position. Projector and backbone are trained together for
six passes over 512 samples (warm-up then cosine learning rate), the vision encoders stay fixed.
The model is then asked every (image, question) pair and exact matches are
counted. Takes about half a minute; a toy this small does not reach 100%.
"""

from cobra_ssm import BackboneConfig, CobraConfig, Conversation, ImageInput, init_cobra
from cobra_ssm.backbone import GenerationSession, SamplingConfig, generate
from cobra_ssm.model import build_sequence, encode_image, project_visual
from cobra_ssm.prompting import detokenize
from cobra_ssm.training import (
    COLORS,
    CORNERS,
    QUESTIONS,
    TrainConfig,
    answer_for,
    dataset_loss,
    make_synthetic_dataset,
    render_square_image,
    train_toy,
)

cfg = CobraConfig(image_size=16, patch_size=8, dino_dim=8, siglip_dim=8,
                  backbone=BackboneConfig(d_model=32, n_layers=2, d_state=8))
model = init_cobra(cfg, seed=0)
train = make_synthetic_dataset(512, 16, seed=0)

print(f"loss before: {dataset_loss(model, train):.3f}")
result = train_toy(model, train, TrainConfig(lr=3e-3, batch_size=1, epochs=6))
model = result.model
print(f"loss after {len(result.losses)} steps: {dataset_loss(model, train):.3f}")

correct = total = 0
for color in COLORS:
    for corner in CORNERS:
        visual = project_visual(model, encode_image(model, ImageInput(render_square_image(16, color, corner))))
        for q in QUESTIONS:
            seq = build_sequence(model, visual, Conversation.single(q), "chat")
            answer = detokenize(generate(GenerationSession(SamplingConfig(max_new=16)), seq, model.backbone))
            expected = answer_for(q, color, corner)
            correct += answer == expected
            total += 1
            mark = "ok " if answer == expected else "   "
            print(f"  {mark}{color:<6} {corner:<12} {q:<26} -> {answer!r}")
print(f"exact matches: {correct}/{total}")
