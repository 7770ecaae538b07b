"""
FAQ KG Matcher - Knowledge-Anchored FAQ Question Answering.
Anchors queries and FAQ titles to knowledge graph entities and triples
and ranks titles with multi-channel text matchers.
"""
