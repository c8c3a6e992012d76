"""Episode generation, benchmarking, oracle verification and the command line."""
