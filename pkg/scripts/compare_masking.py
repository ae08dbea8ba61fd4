from src.config import MaskingStrategy, TrainConfig, get_settings
from src.datagen import training_corpus
from src.evaluation import mean_visible_mask_fraction
from src.training import pretrain

SEEDS = (0, 1, 2)
ATTENTIONAL = MaskingStrategy(text="attentional", image="attentional")
RANDOM = MaskingStrategy(text="random", image="random")


def compare(seed: int) -> tuple[float, float]:
    """Mask-on-visible-token fraction of attentional and random masking after training."""
    config = TrainConfig(seed=seed)
    model = pretrain(config).state.model
    corpus = training_corpus(config.corpus, config.model)
    attentional = mean_visible_mask_fraction(model, corpus, config.mask, ATTENTIONAL, seed)
    random = mean_visible_mask_fraction(model, corpus, config.mask, RANDOM, seed)
    return attentional, random


if __name__ == "__main__":
    import logging

    logging.basicConfig(level=get_settings().log_level)

    gaps = []
    for seed in SEEDS:
        attentional, random = compare(seed)
        gaps.append(attentional - random)
        print(f"seed {seed}: attentional {attentional:.3f}  random {random:.3f}")
    print(f"mean gap {sum(gaps) / len(gaps):.3f}")
