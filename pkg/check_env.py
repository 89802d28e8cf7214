#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Check environment variables setup.

Run this script to verify your .env file points the pipeline at its model
services and scene catalog.
"""

import os
import sys
from pathlib import Path

import requests
from dotenv import load_dotenv

# Fix Windows encoding issues
if sys.platform == 'win32':
    import io
    sys.stdout = io.TextIOWrapper(sys.stdout.buffer, encoding='utf-8')

load_dotenv()

print("=" * 60)
print("Environment Variables Check")
print("=" * 60)
print()

# Required for `cli.py run` without --mock-script
required_vars = {
    'FIELDSIGHT_RQM_URL': 'Reasoning-query model endpoint (POST {model, prompt, images})',
    'FIELDSIGHT_FSM_URL': 'Farmland segmentation model endpoint (POST {image, box?})',
}

optional_vars = {
    'FIELDSIGHT_RQM_MODEL': ('', 'Model name sent to the reasoning endpoint'),
    'FIELDSIGHT_MODE': ('full', 'Correction mode: full, temporal-only, enlarge-only, no-query'),
    'FIELDSIGHT_WORKERS': ('1', 'Parallel patch workers'),
    'FIELDSIGHT_LOG_LEVEL': ('INFO', 'Logging level'),
    'FIELDSIGHT_CATALOG': ('./data/catalog', 'Scene catalog served by start_server.sh'),
    'PORT': ('5000', 'Query service port'),
}

secret_vars = ['FIELDSIGHT_RQM_API_KEY', 'FIELDSIGHT_FSM_API_KEY']

print("Required Variables:")
print("-" * 60)
all_required_set = True
for var, description in required_vars.items():
    value = os.getenv(var)
    if value:
        print(f"✓ {var:25} = {value}")
    else:
        print(f"✗ {var:25} = NOT SET - {description}")
        all_required_set = False

print()
print("Optional Variables:")
print("-" * 60)
for var, (default, description) in optional_vars.items():
    value = os.getenv(var, default)
    if value == default:
        print(f"  {var:25} = {value or '(empty)'} (default) - {description}")
    else:
        print(f"✓ {var:25} = {value} - {description}")

print()
print("API Keys:")
print("-" * 60)
for var in secret_vars:
    print(f"{'✓' if os.getenv(var) else ' '} {var:25} = {'set' if os.getenv(var) else 'not set (no auth header)'}")

catalog = Path(os.getenv('FIELDSIGHT_CATALOG', './data/catalog'))
print()
print(f"{'✓' if (catalog / 'catalog.jsonl').exists() else '✗'} Scene catalog at {catalog}")

if all_required_set:
    print()
    print("Endpoint reachability:")
    print("-" * 60)
    for var in required_vars:
        try:
            requests.head(os.environ[var], timeout=3)
            print(f"✓ {var:25} reachable")
        except requests.RequestException as e:
            print(f"✗ {var:25} unreachable: {type(e).__name__}")

print()
print("=" * 60)
if all_required_set:
    print("✓ All required variables are set!")
    print()
    print("Next steps:")
    print("1. Ingest scenes:")
    print("   cd backend && python cli.py ingest --catalog ../data/catalog scenes/*.png")
    print("2. Run the pipeline:")
    print("   python cli.py run --patches ../data/patches --catalog ../data/catalog --out ../out")
else:
    print("✗ Some required variables are missing!")
    print()
    print("To fix:")
    print("1. Create .env file: cp .env.example .env")
    print("2. Edit .env and set FIELDSIGHT_RQM_URL and FIELDSIGHT_FSM_URL")
    print("3. Run this script again to verify")
    print()
    print("Scripted runs need no services: python cli.py run ... --mock-script script.json")
print("=" * 60)
