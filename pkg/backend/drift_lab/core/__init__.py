"""Core shared modules: grids, DFSL files, tables, configuration, errors"""
