"""Desk-scale demo model plugins and test fixtures.

Each module here is a standalone worker executable
(``python3 -m prism_gateway.demo_models.<name>``) obeying the stdio plugin
contract. They exist to exercise the gateway protocol end to end, not to
make clinical claims.
"""
