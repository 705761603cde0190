int clamp_range(int v) {
    if (v < -100)
        return -100;
    if (v > 100)
        return 100;
    return v;
}
