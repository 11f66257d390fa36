"""ViT slice features + Bi-LSTM sequence classification for 3D brain
volumes, with a from-scratch reverse-mode training core."""

from .bilstm import BiLSTMWeights, LSTMCellParams, LSTMConfig, bilstm_forward, classify_sequence, lstm_cell_step, predicted_class
from .kernels import attention, elementwise, gelu, grad_check, layer_norm, lstm_cell, matmul, multi_grad_check, sigmoid, softmax_lastdim, sparse_ce_loss, tanh
from .metrics import ConfusionMatrix, CrossValReport, MetricsReport, aggregate_folds, confusion, metrics
from .tensor import Tensor
from .train import AdamConfig, AdamState, TrainConfig, TrainReport, adam_step, evaluate_head, fit, kfold_split, stratified_kfold_split, train_head
from .vit import ViTConfig, ViTWeights, add_positional, embed_tokens, encode, encoder_block, extract_slice_features, msa, patchify, pooler_features, unpatchify, vit_tensor_spec
from .volume import Dataset, Sample, SynthConfig, Volume, VolumeHeader, bilinear_resize, load_volume, prepare_slice, select_axial_slices, synth_dataset, write_volume

__version__ = "0.1.0"
