"""Dense tensor operations with hand written backward passes.

Tensors are plain numpy arrays shaped (C, H, W).
"""
