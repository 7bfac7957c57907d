"""Neural hypothesis scorer: tiny autodiff, epipolar attention model, training."""
