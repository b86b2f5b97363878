"""Test suite for dml-seq2seq."""
