# External module dependencies
import os
import hypothesis
import numpy as np
import pytest

np.seterr(all = 'warn')

hypothesis.settings.register_profile('dev', max_examples = 20, deadline = None)
hypothesis.settings.register_profile('ci', max_examples = 100, deadline = None)
hypothesis.settings.register_profile('fast', max_examples = 5, deadline = None)
hypothesis.settings.register_profile('debugger', report_multiple_bugs = False, deadline = None)
hypothesis.settings.load_profile(os.getenv('HYPOTHESIS_PROFILE', 'dev'))

def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: training runs and timing benchmarks')

def pytest_collection_modifyitems(config, items):
    if os.getenv('MAMRL_SLOW', '0') == '1': return
    skip = pytest.mark.skip(reason = 'set MAMRL_SLOW=1 to run')
    for item in items:
        if 'slow' in item.keywords: item.add_marker(skip)
