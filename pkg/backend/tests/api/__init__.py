"""Scene query service tests."""
