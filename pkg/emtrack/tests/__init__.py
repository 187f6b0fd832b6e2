"""emtrack Test Suite"""
