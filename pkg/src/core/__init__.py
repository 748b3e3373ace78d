"""核心模块：环境、扩散策略、世界模型、MCTS 规划器、指标与实验流程"""
