#!/usr/bin/env python3
"""
marmamba - Main Entry Point

CT metal-artifact reduction toolkit:
- Synthetic CT metal-artifact datasets (phantom, forward projection, FBP)
- UNet restoration network with directional state-space blocks
- Progressive-resolution training with Adam and cosine restarts
- PSNR/SSIM/RMSE/perceptual evaluation per metal size group
- Directional spectral analysis of the scanning branches
- Finite-difference gradient checks and an invariant self-test
"""

import sys
from src.ui.cli import main

if __name__ == "__main__":
    sys.exit(main())
