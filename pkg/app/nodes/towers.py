import numpy as np

from app.encoders import encode_batch
from app.losses import combined_loss
from app.state import EpisodeState, Tower
from app.tensor import Tensor


def tower_embed(state: EpisodeState, tower: Tower, features: np.ndarray) -> Tensor:
    """Encodes rows with the episode's current (possibly adapted) copy of a tower."""
    params = getattr(state["model"], tower)
    return encode_batch(
        params,
        features,
        adapters=state.get("adapters", {}).get(tower),
        layer_tensors=state.get("trainable", {}).get(tower),
    )


def candidate_images(state: EpisodeState, rows: np.ndarray) -> Tensor:
    pool = state["pool"]
    if "vision" in state.get("towers", ()):
        return tower_embed(state, "vision", pool.features[rows])
    return Tensor(pool.embeddings[rows])


def episode_loss(state: EpisodeState) -> Tensor:
    images = candidate_images(state, state["train_rows"])
    captions = tower_embed(state, "text", state["caption_features"])
    return combined_loss(images, captions, state["config"].loss)
