"""Trainable orderless pooling encoders (bilinear, NetVLAD, NetFV, NetBoVW)."""
