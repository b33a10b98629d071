import torch

# single-threaded kernels keep runs deterministic and timings predictable
torch.set_num_threads(1)
