"""Desk-scale multi-label image recognition: MAE pretraining, label-graph GAT, constrained fine-tuning."""
