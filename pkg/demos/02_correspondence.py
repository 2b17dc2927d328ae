"""Deep-feature correspondence between two views of the same garment.

Extracts denoiser features from the toy backend for an image and a shifted
copy of it, matches them by mutual cosine nearest neighbors, rejects
displacement outliers, and reports how well the recovered match displacements
agree with the known shift.
"""

import numpy as np

from tryon.backend import ToyBackend
from tryon.features import extract_features, match_nn, reject_outliers, to_control_points

SHIFT = 8  # pixels; a multiple of the feature stride so matches are exact


def main():
    be = ToyBackend(image_size=64, num_steps=50)
    rng = np.random.default_rng(0)
    garment = rng.uniform(0, 1, (64, 64, 3))

    person = np.zeros_like(garment)
    person[:, SHIFT:] = garment[:, :-SHIFT]  # same garment, worn 8 px to the right

    g_mask = np.zeros((64, 64), bool)
    g_mask[16:48, 8:40] = True
    p_mask = np.zeros_like(g_mask)
    p_mask[:, SHIFT:] = g_mask[:, :-SHIFT]

    t_feat = round(0.26 * be.schedule().num_steps)
    f_g = extract_features(garment, t_feat, be, image_id="garment")
    f_p = extract_features(person, t_feat, be, image_id="person")
    print(f"feature grids: {f_g.grid} at stride {f_g.stride:g} px, t_feat={t_feat}")

    matches = match_nn(f_g, g_mask, f_p, p_mask)
    print(f"mutual NN matches:   {len(matches)}")

    kept = reject_outliers(matches, k=3.0)
    print(f"after MAD rejection: {len(kept)}")

    disp = kept.tgt_px() - kept.src_px()
    print(f"median displacement: {np.median(disp, axis=0)}  (true shift: [{SHIFT}. 0.])")

    cps = to_control_points(kept, max_points=128)
    err = np.abs((cps.targets - cps.sources) - [SHIFT, 0.0]).max()
    print(f"control pairs:       {len(cps)}, worst displacement error {err:.2f} px")


if __name__ == "__main__":
    main()
