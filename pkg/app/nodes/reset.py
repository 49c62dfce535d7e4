import logging
import time

from app.state import EpisodeState


logger = logging.getLogger(__name__)


class ResetNode:
    """Drops every parameter change of the episode."""

    def run(self, state: EpisodeState) -> EpisodeState:
        for adapters in state.get("adapters", {}).values():
            adapters.reset()
        # trainable copies are discarded; the base weights were never written
        state["trainable"] = {}

        if state.get("aborted"):
            state["post_ranking"] = state["pre_ranking"].head(state["config"].k)
        state["wall_time"] = time.perf_counter() - state["started_at"]
        logger.debug(
            "Episode %s done in %.4fs (epochs=%s aborted=%s)",
            state["query_id"],
            state["wall_time"],
            state.get("epoch", 0),
            state.get("aborted", False),
        )
        return state
