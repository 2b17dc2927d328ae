"""Full try-on pipeline on the deterministic toy backend.

Registers a garment onto a person image (deep-feature correspondence -> MLS
warp -> fringe inpainting), then runs the masked-extended-attention guided
denoising loop, and saves the result plus intermediates next to this script.
"""

import os

import numpy as np

from tryon.backend import ToyBackend
from tryon.cli import save_image
from tryon.diffusion import GuidanceConfig
from tryon.pipeline import TryOnJob, run_try_on

OUT_DIR = os.path.join(os.path.dirname(__file__), "out_toy")


def main():
    rng = np.random.default_rng(0)
    person = rng.uniform(0, 1, (64, 64, 3))
    garment = person.copy()  # self-transfer keeps the demo backend honest
    mask = np.zeros((64, 64), bool)
    mask[16:56, 12:52] = True

    job = TryOnJob(person=person, garment=garment,
                   person_mask=mask, garment_mask=mask.copy(),
                   prompt="a person wearing the garment",
                   guidance=GuidanceConfig(alpha_mea=15.0, alpha_text=7.5,
                                           stroke_fraction=0.35, beta=1.5),
                   seed=7)

    be = ToyBackend(image_size=64, num_steps=50)
    inter = {}
    result = run_try_on(job, be, intermediates=inter)

    os.makedirs(OUT_DIR, exist_ok=True)
    save_image(os.path.join(OUT_DIR, "result.png"), result)
    save_image(os.path.join(OUT_DIR, "registered.png"), inter["registered"])
    save_image(os.path.join(OUT_DIR, "warped_garment.png"), inter["warped_garment"])

    print(f"crop: origin {inter['crop'][:2]}, side {inter['crop'][2]} px")
    print(f"fringe pixels inpainted during registration: {int(inter['fringe'].sum())}")
    masses = sorted(inter["attention"].items())
    print(f"attention mass on reference, first/last step: "
          f"{masses[-1][1]:.3f} -> {masses[0][1]:.3f}")
    print(f"background preserved bit-exactly: "
          f"{np.array_equal(result[~mask], person[~mask])}")
    print(f"wrote {OUT_DIR}/result.png")


if __name__ == "__main__":
    main()
