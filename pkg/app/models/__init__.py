# Network components: encoder, gates, gated transformer-XL and the CoBERL head
