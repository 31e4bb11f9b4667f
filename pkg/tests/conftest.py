from __future__ import annotations

import numpy as np
import pytest

from altseg.core import LabelMask, Modality, Volume, make_class_table

AMOS_ORGANS = [
    "spleen", "right kidney", "left kidney", "gallbladder", "esophagus",
    "liver", "stomach", "aorta", "inferior vena cava", "pancreas",
    "right adrenal gland", "left adrenal gland", "duodenum",
]
MMWHS_SUBSTRUCTURES = ["MY", "LA", "LV", "RA", "RV", "AA", "PA"]


@pytest.fixture
def amos_table():
    return make_class_table(AMOS_ORGANS, "amos")


@pytest.fixture
def tiny_table():
    return make_class_table(["spleen", "liver"], "tiny")


def make_volume(data, modality=Modality.CT, spacing=(1.0, 1.0, 1.0), vol_id="v", preprocessed=False):
    return Volume(np.asarray(data, dtype=np.float32), spacing, modality, vol_id, preprocessed)


def make_mask(data, table, mask_id="m"):
    return LabelMask(np.asarray(data, dtype=np.int16), table, mask_id)
