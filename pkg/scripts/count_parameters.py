#!/usr/bin/env python3
"""Print parameter counts and bottleneck sizes for the desk and full-size networks."""
from descatter3d.neural3d import NetworkConfig, build_network


def main():
    for name, cfg in (("desk", NetworkConfig()), ("full-scale", NetworkConfig.full_scale())):
        net = build_network(cfg)
        bottleneck = tuple(n // 2 ** cfg.n_stages for n in cfg.input_dims)
        print(f"{name:12s} stages={cfg.n_stages} base={cfg.base_channels} input={cfg.input_dims} "
              f"bottleneck={bottleneck} params={net.n_parameters():,}")


if __name__ == "__main__":
    main()
