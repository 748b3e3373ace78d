"""源代码包"""
