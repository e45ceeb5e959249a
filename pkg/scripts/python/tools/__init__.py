"""ecgforge development tools: the test runner and the dev environment bootstrap."""
