"""Components: drift fields, parabolic solver, resolvents, kernels, envelopes, paths"""
