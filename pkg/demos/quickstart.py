"""Train a small ReconNet on scikit-image samples and reconstruct a held-out picture.

Run with ``python demos/quickstart.py [iterations]``.  Needs the ``samples``
extra (scikit-image).  A few hundred Adam steps already beat the linear
phi^T y decoder by a wide margin; the default of 600 takes under a minute.
"""

import sys

from reconnet.datapipe import TEST_IMAGES, TRAIN_IMAGES, PatchDataset, extract_patches, sample_image
from reconnet.evalkit import linear_decode, psnr, reconstruct_image
from reconnet.models import ReconNetSpec, build_reconnet
from reconnet.sensing import gen_gaussian_orthonormal
from reconnet.tensor import Prng
from reconnet.training import TrainConfig, train_euclidean

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 600
mr = 0.25

data = PatchDataset.concat(extract_patches(sample_image(n), source=n) for n in TRAIN_IMAGES[:4])
print(f"{len(data)} training patches")

phi = gen_gaussian_orthonormal(mr=mr, seed=1)
model = build_reconnet(ReconNetSpec(mr, n_units=1), Prng(3), init="phit", phi=phi)
cfg = TrainConfig(batch_size=8, iterations=iters, learning_rate=1e-3, optimizer="adam")


def progress(it, loss, _model):
    if it % 100 == 0:
        print(f"  iter {it:5d}  loss {loss:8.3f}")


train_euclidean(model, data, phi, cfg, callback=progress)

img = sample_image(TEST_IMAGES[0])
rec, seconds = reconstruct_image(model, phi, img)
print(f"ReconNet   {psnr(img, rec):6.2f} dB  ({seconds:.3f} s)")
print(f"phi^T y    {psnr(img, linear_decode(phi, img)):6.2f} dB")
