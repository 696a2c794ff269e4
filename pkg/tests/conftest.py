"""Keep the slow acceptance gate after the unit tests in a full run."""


def pytest_collection_modifyitems(config, items):
    items.sort(key=lambda it: it.path.name == "test_acceptance.py")
