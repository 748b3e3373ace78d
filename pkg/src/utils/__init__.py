"""工具模块：配置、日志、文件读写、实验清单"""
