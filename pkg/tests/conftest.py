import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.manual_seed(0)


@pytest.fixture(scope="session")
def face_bank():
    """Small shared bank of synthetic faces (8 identities x 10 samples, 64px)."""
    from makeupcloak.data import synth_identity_set

    return synth_identity_set(8, 10, 64, seed=42, style_domain="source")


@pytest.fixture(scope="session")
def trained_embedder(face_bank):
    """One trained toy face-recognition model, shared across tests."""
    from makeupcloak.networks import train_face_embedder

    model = train_face_embedder(face_bank, model_seed=1)
    model.eval()
    return model
