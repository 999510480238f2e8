import logging
import time
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from VOD.faim import DEFAULT_CONFIG, FAIM, RunConfig, load_config
from VOD.faim.numerics import Parameters, load_parameters
from VOD.faim.ticam import FrameDetections


class VODService():
    def __init__(self, cfg: Union[RunConfig, str, Path, None] = None,
                 checkpoint: Union[str, Path, None] = None):
        logging.info('Initializing VOD Service...')
        self.cfg = cfg if isinstance(cfg, RunConfig) else load_config(cfg or DEFAULT_CONFIG)
        self.model = FAIM(self.cfg, Parameters(rng_seed=self.cfg.seed), with_mask_branch=False)
        if checkpoint is not None:
            load_parameters(checkpoint, self.model.params, prefixes=self.model.inference_prefixes)
            logging.info('loaded %s', checkpoint)

    def infer(self, frames: np.ndarray, frame_indices: Optional[Sequence[int]] = None) -> List[FrameDetections]:
        """Detect objects in a group of frames [m, 3, H, W], aggregated together."""
        stime = time.time()
        result = self.model(frames, frame_indices)
        logging.info('VOD Result: %d detections in %d frames. time used %.2f.',
                     sum(len(r.scores) for r in result), len(result), time.time() - stime)
        return result


if __name__ == '__main__':
    from VOD.faim.synthdata import generate_clip

    service = VODService()
    clip = generate_clip(8, service.cfg.image_size, service.cfg.image_size, 3, seed=0)
    for detections in service.infer(clip.frames):
        print(detections.frame_index, detections.boxes[:3], detections.scores[:3])
