#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Run all the unit tests

Set MAPEX_SLOW=1 to include the full-size acceptance runs
"""

import os
import unittest
import sys

if __name__ == "__main__":
    scriptdir = os.path.dirname(os.path.realpath(__file__))
    loader = unittest.TestLoader()
    suite = loader.discover(scriptdir, pattern = 'test_*.py', top_level_dir = scriptdir)

    runner = unittest.TextTestRunner()
    ret = not runner.run(suite).wasSuccessful()
    sys.exit(ret)
