"""
FieldSight test suite.

- tests/unit/         per-module tests, including the raster oracles
- tests/api/          scene query service endpoints
- tests/integration/  golden workflows replayed through scripted adapters
- tests/fixtures/     synthetic world builders and workflow scripts
"""
