"""Compressive spectral image fusion with linearized ADMM and its unrolled network.

Submodules:

* ``cube_io``: spectral cube container, binary cube files, decimation, images.
* ``cassi``: dual-arm coded-aperture acquisition model.
* ``transforms``: soft threshold, learnable conv transforms, fixed 3-D DCT.
* ``solver``: classical linearized ADMM.
* ``network``: the unrolled network, initialisation and checkpoints.
* ``training``: loss, reverse-mode gradients, Adam and the training loop.
* ``metrics``: PSNR, SSIM and SAM.
* ``cs``: block compressive sensing of grayscale images.
* ``synthetic``: synthetic spectral scenes.
* ``cli``: the ``ladmmnet`` command.

Nothing is imported here so that ``LADMMNET_THREADS`` can take effect before
numpy loads (see :mod:`ladmmnet.cli`).
"""

__version__ = "0.1.0"
