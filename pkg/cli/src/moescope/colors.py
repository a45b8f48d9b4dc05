"""
Contains RGB tuples for the colors used in moescope charts.

"""

red = (214, 39, 40)
green = (44, 160, 44)
yellow = (188, 189, 34)
orange = (255, 127, 14)
blue = (31, 119, 180)
dark_green = (8, 54, 0)
grey = (127, 127, 127)

DOMAIN_COLORS = {
    "text": blue,
    "code": orange,
    "multilingual": green,
    "instruct": red,
    "repeat": yellow,
}

_FALLBACK = [dark_green, grey]


def to_mpl(rgb):
    """0-255 RGB tuple to the 0-1 floats matplotlib expects"""
    return tuple(channel / 255 for channel in rgb)


def domain_color(tag, index=0):
    """
    Chart color of a domain tag. Language tags share their domain's color;
    unknown domains cycle through a fallback palette.
    """
    domain = str(tag).split(":", 1)[0]
    if domain in DOMAIN_COLORS:
        return to_mpl(DOMAIN_COLORS[domain])
    return to_mpl(_FALLBACK[index % len(_FALLBACK)])
