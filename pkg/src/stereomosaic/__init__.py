"""Dense stereo surface mosaicking."""
