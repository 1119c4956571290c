"""PSNR versus measurement noise for a checkpoint on a folder of images.

Usage: ``python demos/noise_sweep.py model.rcn images/``
"""

import sys

from reconnet.datapipe import list_images, read_image
from reconnet.evalkit import run_eval
from reconnet.models import load_checkpoint

ckpt = load_checkpoint(sys.argv[1])
images = {p.stem: read_image(p) for p in list_images(sys.argv[2])}
report = run_eval({("model", ckpt.phi.mr): (ckpt.model, ckpt.phi)}, images, [ckpt.phi.mr])
for sigma in (0, 10, 20, 30):
    print(f"sigma {sigma:2d}: mean {report.mean_psnr(sigma=sigma):6.2f} dB")
