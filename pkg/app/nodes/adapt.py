import logging
import math

from app.nodes.towers import episode_loss
from app.optim import AdamW
from app.state import EpisodeState
from app.tensor import backward


logger = logging.getLogger(__name__)


class AdaptNode:
    """One full-batch optimizer step on the combined loss over the candidate pairs."""

    def run(self, state: EpisodeState) -> EpisodeState:
        optimizer = state["optimizer"]
        loss = episode_loss(state)
        value = loss.item()
        if not math.isfinite(value):
            return self._abort(state, f"non-finite adaptation loss at epoch {state['epoch'] + 1}")

        grads = backward(loss, wrt=optimizer.params)
        if not AdamW.grads_finite(grads):
            return self._abort(state, f"non-finite gradient at epoch {state['epoch'] + 1}")
        optimizer.step(grads)

        state["loss_trace"].append(value)
        state["epoch"] += 1
        if state["epoch"] >= state["config"].epochs:
            state["loss_after"] = episode_loss(state).item()
        return state

    @staticmethod
    def _abort(state: EpisodeState, message: str) -> EpisodeState:
        logger.warning("Query %s: %s; falling back to zero-shot order", state["query_id"], message)
        state["aborted"] = True
        state["error"] = message
        return state
