#
# Copyright (c) nexB Inc. and others. All rights reserved.
# SPDX-License-Identifier: Apache-2.0
# See http://www.apache.org/licenses/LICENSE-2.0 for the license text.
# See https://github.com/aboutcode-org/hybridmask for support or download.
# See https://aboutcode.org for more information about nexB OSS projects.
#

"""
Hybrid sparse masking for 3D medical images: masked-reconstruction
pretraining of a sparse CNN stage stack joined to a transformer, and the
tools to fine-tune, ablate and verify it.
"""

__version__ = "0.1.0"
