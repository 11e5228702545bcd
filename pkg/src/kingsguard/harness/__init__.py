"""Scenario library, differential oracle, fuzzer and command-line interface."""
